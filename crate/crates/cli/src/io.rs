use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use jlct::curve::StepCurve;
use jlct::data::VariableRoles;
use serde::{Deserialize, Serialize};

/// Variable roles as written in a TOML file.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolesFile {
    pub split: Vec<String>,
    pub survival: Vec<String>,
    pub fixed: Vec<String>,
    pub random: Vec<String>,
    #[serde(default = "default_subject")]
    pub subject: String,
    #[serde(default = "default_time")]
    pub time: String,
    #[serde(default = "default_outcome")]
    pub outcome: String,
    #[serde(default = "default_event_time")]
    pub event_time: String,
    #[serde(default = "default_status")]
    pub status: String,
}

fn default_subject() -> String {
    "ID".into()
}
fn default_time() -> String {
    "t".into()
}
fn default_outcome() -> String {
    "y".into()
}
fn default_event_time() -> String {
    "T".into()
}
fn default_status() -> String {
    "delta".into()
}

impl From<RolesFile> for VariableRoles {
    fn from(r: RolesFile) -> Self {
        VariableRoles {
            split_vars: r.split,
            survival_vars: r.survival,
            fixed_vars: r.fixed,
            random_vars: r.random,
            subject_col: r.subject,
            time_col: r.time,
            outcome_col: r.outcome,
            event_time_col: r.event_time,
            status_col: r.status,
        }
    }
}

impl From<&VariableRoles> for RolesFile {
    fn from(r: &VariableRoles) -> Self {
        RolesFile {
            split: r.split_vars.clone(),
            survival: r.survival_vars.clone(),
            fixed: r.fixed_vars.clone(),
            random: r.random_vars.clone(),
            subject: r.subject_col.clone(),
            time: r.time_col.clone(),
            outcome: r.outcome_col.clone(),
            event_time: r.event_time_col.clone(),
            status: r.status_col.clone(),
        }
    }
}

pub fn read_roles(path: &Path) -> Result<VariableRoles> {
    let text = fs::read_to_string(path).with_context(|| format!("reading roles file {}", path.display()))?;
    let file: RolesFile = toml::from_str(&text).with_context(|| format!("parsing roles file {}", path.display()))?;
    Ok(file.into())
}

pub fn write_roles(path: &Path, roles: &VariableRoles) -> Result<()> {
    let text = toml::to_string(&RolesFile::from(roles))?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `dir/stem.csv` -> `dir/stem<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

/// Survival curves as `ID, t, S` rows, one step point per row.
pub fn write_curves<'a>(path: &Path, curves: impl IntoIterator<Item = (&'a str, &'a StepCurve)>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["ID", "t", "S"])?;
    for (id, c) in curves {
        for (t, s) in c.times.iter().zip(&c.values) {
            w.write_record([id.to_string(), t.to_string(), s.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Curves in file order of first appearance of each subject.
pub fn read_curves(path: &Path) -> Result<Vec<(String, StepCurve)>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out: Vec<(String, StepCurve)> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != 3 {
            bail!("{}: line {} has {} fields, expected 3", path.display(), line + 2, rec.len());
        }
        let id = rec[0].to_string();
        let t: f64 = rec[1].trim().parse().with_context(|| format!("line {}: bad time", line + 2))?;
        let s: f64 = rec[2].trim().parse().with_context(|| format!("line {}: bad survival", line + 2))?;
        match out.last_mut() {
            Some((last, c)) if *last == id => {
                if c.times.last().is_some_and(|&p| t <= p) {
                    bail!("{}: times for subject {id} are not increasing", path.display());
                }
                c.times.push(t);
                c.values.push(s);
            }
            _ => {
                if out.iter().any(|(other, _)| *other == id) {
                    bail!("{}: rows of subject {id} are not contiguous", path.display());
                }
                out.push((
                    id,
                    StepCurve {
                        times: vec![t],
                        values: vec![s],
                        horizon: f64::INFINITY,
                    },
                ));
            }
        }
    }
    Ok(out)
}
