//! Long-format longitudinal/survival data, CSV ingestion and the
//! counting-process (left-truncated, right-censored) conversion.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("column `{0}` not found")]
    MissingColumn(String),
    #[error("subject `{subject}`: measurement times are not increasing ({previous} then {current})")]
    Ordering {
        subject: String,
        previous: f64,
        current: f64,
    },
    #[error("subject `{subject}`: duplicate measurement time {time}")]
    DuplicateTime { subject: String, time: f64 },
    #[error("subject `{0}` has no measurements")]
    EmptySubject(String),
    #[error("subject `{subject}`: event time {event_time} precedes last measurement {last_time}")]
    InconsistentEvent {
        subject: String,
        event_time: f64,
        last_time: f64,
    },
    #[error("subject `{subject}`: column `{column}` must be constant within a subject")]
    NonConstantEvent { subject: String, column: String },
    #[error("line {line}, column `{column}`: cannot parse `{value}`")]
    Parse {
        line: usize,
        column: String,
        value: String,
    },
    #[error("line {line}, column `{column}`: missing value")]
    MissingValue { line: usize, column: String },
    #[error("record for subject `{subject}` has {found} covariates, expected {expected}")]
    Shape {
        subject: String,
        found: usize,
        expected: usize,
    },
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Which columns play which role in the joint model.
///
/// The four covariate lists may overlap freely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableRoles {
    pub split_vars: Vec<String>,
    pub survival_vars: Vec<String>,
    pub fixed_vars: Vec<String>,
    pub random_vars: Vec<String>,
    pub subject_col: String,
    pub time_col: String,
    pub outcome_col: String,
    pub event_time_col: String,
    pub status_col: String,
}

impl VariableRoles {
    /// Union of all covariate lists, first occurrence wins.
    pub fn covariates(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for name in self
            .split_vars
            .iter()
            .chain(&self.survival_vars)
            .chain(&self.fixed_vars)
            .chain(&self.random_vars)
        {
            if !out.contains(name) {
                out.push(name.clone());
            }
        }
        out
    }

    /// Roles used by the simulation generator: `ID, t, y, X1..X5, T, delta`.
    pub fn simulation_default() -> Self {
        let all: Vec<String> = (1..=5).map(|k| format!("X{k}")).collect();
        VariableRoles {
            split_vars: all.clone(),
            survival_vars: vec!["X3".into(), "X4".into(), "X5".into()],
            fixed_vars: all.clone(),
            random_vars: all,
            subject_col: "ID".into(),
            time_col: "t".into(),
            outcome_col: "y".into(),
            event_time_col: "T".into(),
            status_col: "delta".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongRecord {
    pub time: f64,
    pub outcome: f64,
    /// Aligned with the owning dataset's covariate names.
    pub covariates: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubjectEvent {
    pub event_time: f64,
    /// `true` for an observed event, `false` for censoring.
    pub status: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    pub records: Vec<LongRecord>,
    pub event: SubjectEvent,
}

impl Subject {
    pub fn last_time(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.time)
    }
}

/// A panel of subjects, each with strictly time-ordered measurements and one
/// event tuple. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongDataset {
    covariate_names: Vec<String>,
    outcome_name: String,
    subjects: Vec<Subject>,
}

impl LongDataset {
    pub fn new(
        covariate_names: Vec<String>,
        outcome_name: impl Into<String>,
        subjects: Vec<Subject>,
    ) -> Result<Self, DataError> {
        let p = covariate_names.len();
        for s in &subjects {
            if s.records.is_empty() {
                return Err(DataError::EmptySubject(s.id.clone()));
            }
            for w in s.records.windows(2) {
                if w[1].time == w[0].time {
                    return Err(DataError::DuplicateTime {
                        subject: s.id.clone(),
                        time: w[1].time,
                    });
                }
                if !(w[1].time > w[0].time) {
                    return Err(DataError::Ordering {
                        subject: s.id.clone(),
                        previous: w[0].time,
                        current: w[1].time,
                    });
                }
            }
            if let Some(r) = s.records.iter().find(|r| r.covariates.len() != p) {
                return Err(DataError::Shape {
                    subject: s.id.clone(),
                    found: r.covariates.len(),
                    expected: p,
                });
            }
        }
        Ok(LongDataset {
            covariate_names,
            outcome_name: outcome_name.into(),
            subjects,
        })
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn outcome_name(&self) -> &str {
        &self.outcome_name
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_records(&self) -> usize {
        self.subjects.iter().map(|s| s.records.len()).sum()
    }

    pub fn covariate_index(&self, name: &str) -> Result<usize, DataError> {
        self.covariate_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    }

    /// Subjects at the given positions, in the given order.
    pub fn select_subjects(&self, indices: &[usize]) -> LongDataset {
        LongDataset {
            covariate_names: self.covariate_names.clone(),
            outcome_name: self.outcome_name.clone(),
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
        }
    }

    /// Append a copy of each `(source, new_name)` column; used to hold a
    /// converted version of a covariate next to the original.
    pub fn with_column_copies(&self, copies: &[(String, String)]) -> Result<LongDataset, DataError> {
        let mut idx = Vec::with_capacity(copies.len());
        for (source, _) in copies {
            idx.push(self.covariate_index(source)?);
        }
        let mut names = self.covariate_names.clone();
        names.extend(copies.iter().map(|(_, new)| new.clone()));
        let subjects = self
            .subjects
            .iter()
            .map(|s| Subject {
                id: s.id.clone(),
                event: s.event,
                records: s
                    .records
                    .iter()
                    .map(|r| {
                        let mut cov = r.covariates.clone();
                        cov.extend(idx.iter().map(|&j| r.covariates[j]));
                        LongRecord {
                            time: r.time,
                            outcome: r.outcome,
                            covariates: cov,
                        }
                    })
                    .collect(),
            })
            .collect();
        LongDataset::new(names, self.outcome_name.clone(), subjects)
    }
}

fn parse_field(
    record: &csv::StringRecord,
    col: usize,
    name: &str,
    line: usize,
) -> Result<f64, DataError> {
    let raw = record.get(col).unwrap_or("").trim();
    if raw.is_empty() || raw.eq_ignore_ascii_case("na") || raw.eq_ignore_ascii_case("nan") {
        return Err(DataError::MissingValue {
            line,
            column: name.to_string(),
        });
    }
    raw.parse::<f64>().map_err(|_| DataError::Parse {
        line,
        column: name.to_string(),
        value: raw.to_string(),
    })
}

/// Read a long-format CSV (one row per subject and measurement time).
///
/// Rows of a subject must appear in increasing time order; event columns must
/// be repeated unchanged on every row of the subject.
pub fn ingest_csv(path: impl AsRef<Path>, roles: &VariableRoles) -> Result<LongDataset, DataError> {
    let file = std::fs::File::open(path)?;
    ingest_reader(file, roles)
}

pub fn ingest_reader<R: std::io::Read>(reader: R, roles: &VariableRoles) -> Result<LongDataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let subject_col = find(&roles.subject_col)?;
    let time_col = find(&roles.time_col)?;
    let outcome_col = find(&roles.outcome_col)?;
    let event_col = find(&roles.event_time_col)?;
    let status_col = find(&roles.status_col)?;
    let covariate_names = roles.covariates();
    let cov_cols = covariate_names
        .iter()
        .map(|n| find(n))
        .collect::<Result<Vec<_>, _>>()?;

    let mut order: Vec<String> = Vec::new();
    let mut by_id: HashMap<String, Subject> = HashMap::new();
    for (k, row) in rdr.records().enumerate() {
        let row = row?;
        // header is line 1
        let line = k + 2;
        let id = row.get(subject_col).unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(DataError::MissingValue {
                line,
                column: roles.subject_col.clone(),
            });
        }
        let time = parse_field(&row, time_col, &roles.time_col, line)?;
        let outcome = parse_field(&row, outcome_col, &roles.outcome_col, line)?;
        let event_time = parse_field(&row, event_col, &roles.event_time_col, line)?;
        let status_raw = parse_field(&row, status_col, &roles.status_col, line)?;
        let status = match status_raw {
            s if s == 0.0 => false,
            s if s == 1.0 => true,
            _ => {
                return Err(DataError::Parse {
                    line,
                    column: roles.status_col.clone(),
                    value: status_raw.to_string(),
                })
            }
        };
        let covariates = cov_cols
            .iter()
            .zip(&covariate_names)
            .map(|(&c, n)| parse_field(&row, c, n, line))
            .collect::<Result<Vec<_>, _>>()?;
        let record = LongRecord {
            time,
            outcome,
            covariates,
        };
        match by_id.get_mut(&id) {
            Some(subject) => {
                if subject.event.event_time != event_time {
                    return Err(DataError::NonConstantEvent {
                        subject: id,
                        column: roles.event_time_col.clone(),
                    });
                }
                if subject.event.status != status {
                    return Err(DataError::NonConstantEvent {
                        subject: id,
                        column: roles.status_col.clone(),
                    });
                }
                let prev = subject.last_time();
                if time == prev {
                    return Err(DataError::DuplicateTime { subject: id, time });
                }
                if time < prev {
                    return Err(DataError::Ordering {
                        subject: id,
                        previous: prev,
                        current: time,
                    });
                }
                subject.records.push(record);
            }
            None => {
                order.push(id.clone());
                by_id.insert(
                    id.clone(),
                    Subject {
                        id,
                        records: vec![record],
                        event: SubjectEvent { event_time, status },
                    },
                );
            }
        }
    }
    let subjects = order
        .into_iter()
        .map(|id| by_id.remove(&id).expect("subject recorded in order"))
        .collect::<Vec<_>>();
    for s in &subjects {
        if s.event.event_time < s.last_time() {
            return Err(DataError::InconsistentEvent {
                subject: s.id.clone(),
                event_time: s.event.event_time,
                last_time: s.last_time(),
            });
        }
    }
    LongDataset::new(covariate_names, roles.outcome_col.clone(), subjects)
}

/// Write a dataset in the layout `ingest_csv` reads back.
pub fn write_csv<W: std::io::Write>(
    data: &LongDataset,
    roles: &VariableRoles,
    writer: W,
) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![roles.subject_col.clone(), roles.time_col.clone(), roles.outcome_col.clone()];
    header.extend(data.covariate_names.iter().cloned());
    header.push(roles.event_time_col.clone());
    header.push(roles.status_col.clone());
    w.write_record(&header)?;
    for s in &data.subjects {
        for r in &s.records {
            let mut row = vec![s.id.clone(), r.time.to_string(), r.outcome.to_string()];
            row.extend(r.covariates.iter().map(|v| v.to_string()));
            row.push(s.event.event_time.to_string());
            row.push(if s.event.status { "1".into() } else { "0".into() });
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Counting-process rows `(start, stop]` with covariates frozen at `start`.
///
/// Stored column-wise; row `k` belongs to subject `subject[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtrcDataset {
    covariate_names: Vec<String>,
    outcome_name: String,
    subject_ids: Vec<String>,
    pub subject: Vec<usize>,
    /// Position of the originating measurement within its subject.
    pub record: Vec<usize>,
    pub start: Vec<f64>,
    pub stop: Vec<f64>,
    pub status: Vec<bool>,
    pub outcome: Vec<f64>,
    covariates: Vec<Vec<f64>>,
}

impl LtrcDataset {
    /// Build directly from columns. Rows are validated for `start < stop`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_columns(
        covariate_names: Vec<String>,
        outcome_name: impl Into<String>,
        subject: Vec<usize>,
        start: Vec<f64>,
        stop: Vec<f64>,
        status: Vec<bool>,
        outcome: Vec<f64>,
        covariates: Vec<Vec<f64>>,
    ) -> Result<Self, DataError> {
        let n = start.len();
        let lens_ok = subject.len() == n
            && stop.len() == n
            && status.len() == n
            && outcome.len() == n
            && covariates.len() == covariate_names.len()
            && covariates.iter().all(|c| c.len() == n);
        if !lens_ok {
            return Err(DataError::Invalid("column lengths disagree".into()));
        }
        if let Some(k) = (0..n).find(|&k| !(start[k] < stop[k])) {
            return Err(DataError::Invalid(format!(
                "row {k}: start {} is not before stop {}",
                start[k], stop[k]
            )));
        }
        let n_subj = subject.iter().copied().max().map_or(0, |m| m + 1);
        Ok(LtrcDataset {
            covariate_names,
            outcome_name: outcome_name.into(),
            subject_ids: (0..n_subj).map(|i| (i + 1).to_string()).collect(),
            record: vec![0; n],
            subject,
            start,
            stop,
            status,
            outcome,
            covariates,
        })
    }

    pub fn len(&self) -> usize {
        self.start.len()
    }

    pub fn is_empty(&self) -> bool {
        self.start.is_empty()
    }

    pub fn n_events(&self) -> usize {
        self.status.iter().filter(|&&s| s).count()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn outcome_name(&self) -> &str {
        &self.outcome_name
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    /// Column by name; the outcome is addressable by its own name.
    pub fn column(&self, name: &str) -> Result<&[f64], DataError> {
        if name == self.outcome_name {
            return Ok(&self.outcome);
        }
        self.covariate_names
            .iter()
            .position(|c| c == name)
            .map(|j| self.covariates[j].as_slice())
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    }

    pub fn covariate(&self, j: usize) -> &[f64] {
        &self.covariates[j]
    }

    /// Rows at `rows`, in that order.
    pub fn subset(&self, rows: &[usize]) -> LtrcDataset {
        let pick_f = |v: &Vec<f64>| rows.iter().map(|&k| v[k]).collect::<Vec<_>>();
        LtrcDataset {
            covariate_names: self.covariate_names.clone(),
            outcome_name: self.outcome_name.clone(),
            subject_ids: self.subject_ids.clone(),
            subject: rows.iter().map(|&k| self.subject[k]).collect(),
            record: rows.iter().map(|&k| self.record[k]).collect(),
            start: pick_f(&self.start),
            stop: pick_f(&self.stop),
            status: rows.iter().map(|&k| self.status[k]).collect(),
            outcome: pick_f(&self.outcome),
            covariates: self.covariates.iter().map(pick_f).collect(),
        }
    }
}

/// Convert to counting-process form: one row per measurement, covering the
/// interval up to the next measurement (or the event time for the last one).
///
/// A final measurement taken exactly at the event time would give an empty
/// interval; that row is dropped and its status moves to the previous row.
pub fn to_ltrc(data: &LongDataset) -> Result<LtrcDataset, DataError> {
    let p = data.covariate_names.len();
    let n_rows = data.n_records();
    let mut out = LtrcDataset {
        covariate_names: data.covariate_names.clone(),
        outcome_name: data.outcome_name.clone(),
        subject_ids: data.subjects.iter().map(|s| s.id.clone()).collect(),
        subject: Vec::with_capacity(n_rows),
        record: Vec::with_capacity(n_rows),
        start: Vec::with_capacity(n_rows),
        stop: Vec::with_capacity(n_rows),
        status: Vec::with_capacity(n_rows),
        outcome: Vec::with_capacity(n_rows),
        covariates: vec![Vec::with_capacity(n_rows); p],
    };
    for (i, s) in data.subjects.iter().enumerate() {
        if s.records.is_empty() {
            return Err(DataError::EmptySubject(s.id.clone()));
        }
        let t_event = s.event.event_time;
        if t_event < s.last_time() {
            return Err(DataError::InconsistentEvent {
                subject: s.id.clone(),
                event_time: t_event,
                last_time: s.last_time(),
            });
        }
        let n = s.records.len();
        let emitted_before = out.len();
        for (k, r) in s.records.iter().enumerate() {
            let stop = if k + 1 < n { s.records[k + 1].time } else { t_event };
            if !(stop > r.time) {
                // only possible for the final measurement sitting at the event time
                continue;
            }
            out.subject.push(i);
            out.record.push(k);
            out.start.push(r.time);
            out.stop.push(stop);
            out.status.push(false);
            out.outcome.push(r.outcome);
            for (col, v) in out.covariates.iter_mut().zip(&r.covariates) {
                col.push(*v);
            }
        }
        if out.len() > emitted_before && s.event.status {
            let last = out.len() - 1;
            out.status[last] = true;
        }
    }
    Ok(out)
}

/// Replace each named covariate by the subject's chronologically first value.
pub fn first_encountered(data: &LongDataset, vars: &[String]) -> Result<LongDataset, DataError> {
    let idx = vars
        .iter()
        .map(|v| data.covariate_index(v))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = data.clone();
    for s in &mut out.subjects {
        let first: Vec<f64> = idx.iter().map(|&j| s.records[0].covariates[j]).collect();
        for r in &mut s.records {
            for (&j, &v) in idx.iter().zip(&first) {
                r.covariates[j] = v;
            }
        }
    }
    Ok(out)
}
