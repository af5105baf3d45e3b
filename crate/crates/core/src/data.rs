//! Data model for joint longitudinal / time-to-event datasets.
//!
//! Two CSV tables feed a [`Dataset`]: a long-format marker table
//! (`subject_id,time,value`) and a one-row-per-subject survival table
//! (`subject_id,event_time,status,<covariates...>`). [`assemble_dataset`]
//! joins and validates them.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One marker measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalObservation {
    pub subject_id: String,
    pub time: f64,
    pub value: f64,
}

/// A marker measurement attached to a subject.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub time: f64,
    pub value: f64,
}

/// One row of the survival table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRow {
    pub subject_id: String,
    pub event_time: f64,
    pub event: bool,
    pub covariates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalTable {
    pub covariate_names: Vec<String>,
    pub rows: Vec<SurvivalRow>,
}

/// A subject with baseline covariates, observed time, event indicator and
/// a strictly time-ordered marker history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub covariates: Vec<f64>,
    pub event_time: f64,
    pub event: bool,
    pub observations: Vec<Observation>,
}

impl SubjectRecord {
    /// Observations recorded at or before `t`.
    pub fn history_until(&self, t: f64) -> &[Observation] {
        let k = self.observations.partition_point(|o| o.time <= t);
        &self.observations[..k]
    }

    pub fn last_observation_time(&self) -> f64 {
        self.observations.last().map(|o| o.time).unwrap_or(0.0)
    }

    /// Copy of the subject truncated to the history through `t`.
    pub fn truncated(&self, t: f64) -> SubjectRecord {
        SubjectRecord {
            observations: self.history_until(t).to_vec(),
            ..self.clone()
        }
    }

    fn validate(&self, n_covariates: usize) -> Result<()> {
        let id = &self.id;
        if !(self.event_time.is_finite() && self.event_time > 0.0) {
            return Err(Error::Data(format!(
                "subject {id}: event time must be finite and > 0"
            )));
        }
        if self.covariates.len() != n_covariates {
            return Err(Error::Data(format!(
                "subject {id}: expected {n_covariates} covariates, found {}",
                self.covariates.len()
            )));
        }
        if self.covariates.iter().any(|c| !c.is_finite()) {
            return Err(Error::Data(format!("subject {id}: non-finite covariate")));
        }
        if self.observations.is_empty() {
            return Err(Error::Data(format!(
                "subject {id}: no longitudinal observations"
            )));
        }
        let mut prev = f64::NEG_INFINITY;
        for o in &self.observations {
            if !(o.time.is_finite() && o.time >= 0.0) || !o.value.is_finite() {
                return Err(Error::Data(format!(
                    "subject {id}: observation must have finite time >= 0 and finite value"
                )));
            }
            if o.time <= prev {
                return Err(Error::Data(format!(
                    "subject {id}: observation times must be strictly increasing (duplicate or unsorted time {})",
                    o.time
                )));
            }
            if o.time > self.event_time {
                return Err(Error::Data(format!(
                    "subject {id}: observation after event time ({} > {})",
                    o.time, self.event_time
                )));
            }
            prev = o.time;
        }
        Ok(())
    }
}

/// A validated, immutable collection of subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    subjects: Vec<SubjectRecord>,
    covariate_names: Vec<String>,
}

impl Dataset {
    pub fn new(subjects: Vec<SubjectRecord>, covariate_names: Vec<String>) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::Data("dataset has no subjects".into()));
        }
        let mut seen = HashSet::new();
        for s in &subjects {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Data(format!("duplicate subject_id {}", s.id)));
            }
            s.validate(covariate_names.len())?;
        }
        Ok(Dataset {
            subjects,
            covariate_names,
        })
    }

    pub fn subjects(&self) -> &[SubjectRecord] {
        &self.subjects
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn covariate_index(&self, name: &str) -> Result<usize> {
        self.covariate_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Usage(format!("unknown covariate {name}")))
    }

    pub fn event_times(&self) -> Vec<f64> {
        self.subjects.iter().map(|s| s.event_time).collect()
    }

    pub fn events(&self) -> Vec<bool> {
        self.subjects.iter().map(|s| s.event).collect()
    }

    /// Dataset restricted to the given subject indices (in the given order).
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let subjects = indices.iter().map(|&i| self.subjects[i].clone()).collect();
        Dataset::new(subjects, self.covariate_names.clone())
    }

    /// Long-format marker table.
    pub fn longitudinal_table(&self) -> Vec<LongitudinalObservation> {
        self.subjects
            .iter()
            .flat_map(|s| {
                s.observations.iter().map(move |o| LongitudinalObservation {
                    subject_id: s.id.clone(),
                    time: o.time,
                    value: o.value,
                })
            })
            .collect()
    }

    pub fn survival_table(&self) -> SurvivalTable {
        SurvivalTable {
            covariate_names: self.covariate_names.clone(),
            rows: self
                .subjects
                .iter()
                .map(|s| SurvivalRow {
                    subject_id: s.id.clone(),
                    event_time: s.event_time,
                    event: s.event,
                    covariates: s.covariates.clone(),
                })
                .collect(),
        }
    }
}

/// Indices of subjects in the adjusted risk set `{i : T_i > t}`.
pub fn risk_set(dataset: &Dataset, t: f64) -> Vec<usize> {
    dataset
        .subjects
        .iter()
        .enumerate()
        .filter(|(_, s)| s.event_time > t)
        .map(|(i, _)| i)
        .collect()
}

/// Same as [`risk_set`] but returning subject identifiers.
pub fn risk_set_ids(dataset: &Dataset, t: f64) -> Vec<&str> {
    risk_set(dataset, t)
        .into_iter()
        .map(|i| dataset.subjects[i].id.as_str())
        .collect()
}

fn open_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn parse_num(path: &Path, row: usize, column: &str, cell: &str) -> Result<f64> {
    let v: f64 = cell.parse().map_err(|_| Error::Parse {
        path: path.display().to_string(),
        row,
        message: format!("column {column}: not a number: {cell:?}"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            row,
            message: format!("column {column}: non-finite value"),
        });
    }
    Ok(v)
}

fn csv_err(path: &Path, row: usize, e: csv::Error) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        row,
        message: e.to_string(),
    }
}

/// Reads `subject_id,time,value`. Row numbers in errors count data rows from 1.
pub fn load_longitudinal_csv(path: impl AsRef<Path>) -> Result<Vec<LongitudinalObservation>> {
    let path = path.as_ref();
    let mut rdr = open_reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, 0, e))?.clone();
    let expected = ["subject_id", "time", "value"];
    if header.len() != 3 || header.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::Header {
            path: path.display().to_string(),
            message: format!(
                "expected `subject_id,time,value`, found `{}`",
                header.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 1;
        let rec = rec.map_err(|e| csv_err(path, row, e))?;
        if rec.len() != 3 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                row,
                message: format!("expected 3 columns, found {}", rec.len()),
            });
        }
        let time = parse_num(path, row, "time", &rec[1])?;
        let value = parse_num(path, row, "value", &rec[2])?;
        if time < 0.0 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                row,
                message: "column time: negative time".into(),
            });
        }
        out.push(LongitudinalObservation {
            subject_id: rec[0].to_string(),
            time,
            value,
        });
    }
    Ok(out)
}

/// Reads `subject_id,event_time,status,<covariate...>`.
pub fn load_survival_csv(path: impl AsRef<Path>) -> Result<SurvivalTable> {
    let path = path.as_ref();
    let mut rdr = open_reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, 0, e))?.clone();
    let fixed = ["subject_id", "event_time", "status"];
    if header.len() < 3 || header.iter().zip(fixed).any(|(h, e)| h != e) {
        return Err(Error::Header {
            path: path.display().to_string(),
            message: "expected `subject_id,event_time,status,<covariates...>`".into(),
        });
    }
    let covariate_names: Vec<String> = header.iter().skip(3).map(str::to_string).collect();
    if covariate_names.iter().any(|c| c.is_empty()) {
        return Err(Error::Header {
            path: path.display().to_string(),
            message: "empty covariate name".into(),
        });
    }
    let mut seen = HashSet::new();
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 1;
        let rec = rec.map_err(|e| csv_err(path, row, e))?;
        if rec.len() != header.len() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                row,
                message: format!("expected {} columns, found {}", header.len(), rec.len()),
            });
        }
        let id = rec[0].to_string();
        let event_time = parse_num(path, row, "event_time", &rec[1])?;
        if event_time <= 0.0 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                row,
                message: format!("event_time must be > 0, found {event_time}"),
            });
        }
        let status = parse_num(path, row, "status", &rec[2])?;
        let event = if status == 1.0 {
            true
        } else if status == 0.0 {
            false
        } else {
            return Err(Error::Parse {
                path: path.display().to_string(),
                row,
                message: format!("status must be 0 or 1, found {}", &rec[2]),
            });
        };
        let mut covariates = Vec::with_capacity(covariate_names.len());
        for (j, name) in covariate_names.iter().enumerate() {
            let cell = &rec[3 + j];
            if cell.is_empty() {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    row,
                    message: format!("missing value for covariate {name}"),
                });
            }
            covariates.push(parse_num(path, row, name, cell)?);
        }
        if !seen.insert(id.clone()) {
            return Err(Error::Parse {
                path: path.display().to_string(),
                row,
                message: format!("duplicate subject_id {id}"),
            });
        }
        rows.push(SurvivalRow {
            subject_id: id,
            event_time,
            event,
            covariates,
        });
    }
    Ok(SurvivalTable {
        covariate_names,
        rows,
    })
}

/// Joins the two tables; subject order follows the survival table.
pub fn assemble_dataset(
    longitudinal: &[LongitudinalObservation],
    survival: &SurvivalTable,
) -> Result<Dataset> {
    let index: HashMap<&str, usize> = survival
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| (r.subject_id.as_str(), i))
        .collect();
    let mut obs: Vec<Vec<Observation>> = vec![Vec::new(); survival.rows.len()];
    for o in longitudinal {
        let &i = index.get(o.subject_id.as_str()).ok_or_else(|| {
            Error::Data(format!(
                "longitudinal subject {} has no survival record",
                o.subject_id
            ))
        })?;
        obs[i].push(Observation {
            time: o.time,
            value: o.value,
        });
    }
    let subjects = survival
        .rows
        .iter()
        .zip(obs)
        .map(|(r, mut observations)| {
            observations.sort_by(|a, b| a.time.total_cmp(&b.time));
            SubjectRecord {
                id: r.subject_id.clone(),
                covariates: r.covariates.clone(),
                event_time: r.event_time,
                event: r.event,
                observations,
            }
        })
        .collect();
    Dataset::new(subjects, survival.covariate_names.clone())
}

fn create_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn write_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

pub fn save_longitudinal_csv(
    path: impl AsRef<Path>,
    rows: &[LongitudinalObservation],
) -> Result<()> {
    let path = path.as_ref();
    let mut w = create_writer(path)?;
    w.write_record(["subject_id", "time", "value"])
        .map_err(|e| write_err(path, e))?;
    for r in rows {
        w.write_record([
            r.subject_id.clone(),
            r.time.to_string(),
            r.value.to_string(),
        ])
        .map_err(|e| write_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn save_survival_csv(path: impl AsRef<Path>, table: &SurvivalTable) -> Result<()> {
    let path = path.as_ref();
    let mut w = create_writer(path)?;
    let mut header = vec![
        "subject_id".to_string(),
        "event_time".into(),
        "status".into(),
    ];
    header.extend(table.covariate_names.iter().cloned());
    w.write_record(&header).map_err(|e| write_err(path, e))?;
    for r in &table.rows {
        let mut rec = vec![
            r.subject_id.clone(),
            r.event_time.to_string(),
            if r.event { "1".into() } else { "0".into() },
        ];
        rec.extend(r.covariates.iter().map(|c| c.to_string()));
        w.write_record(&rec).map_err(|e| write_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes both tables of a dataset.
pub fn save_dataset(
    dataset: &Dataset,
    longitudinal_path: impl AsRef<Path>,
    survival_path: impl AsRef<Path>,
) -> Result<()> {
    save_longitudinal_csv(longitudinal_path, &dataset.longitudinal_table())?;
    save_survival_csv(survival_path, &dataset.survival_table())
}

/// Loads and assembles both tables.
pub fn load_dataset(
    longitudinal_path: impl AsRef<Path>,
    survival_path: impl AsRef<Path>,
) -> Result<Dataset> {
    let long = load_longitudinal_csv(longitudinal_path)?;
    let surv = load_survival_csv(survival_path)?;
    assemble_dataset(&long, &surv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        let mut f = std::fs::File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    fn subject(id: &str, t: f64, event: bool, obs: &[(f64, f64)]) -> SubjectRecord {
        SubjectRecord {
            id: id.into(),
            covariates: vec![],
            event_time: t,
            event,
            observations: obs
                .iter()
                .map(|&(time, value)| Observation { time, value })
                .collect(),
        }
    }

    #[test]
    fn parses_longitudinal_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "l.csv",
            "subject_id,time,value\ns1,0.0,2.1\ns1,1.0,2.4\n",
        );
        let rows = load_longitudinal_csv(&p).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].time, 1.0);
        assert_eq!(rows[1].value, 2.4);
    }

    #[test]
    fn header_only_file_is_empty_table() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "l.csv", "subject_id,time,value\n");
        assert!(load_longitudinal_csv(&p).unwrap().is_empty());
    }

    #[test]
    fn non_numeric_cell_names_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "l.csv", "subject_id,time,value\ns1,abc,2.0\n");
        match load_longitudinal_csv(&p) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn extra_column_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "l.csv", "subject_id,time,value\ns1,0,2.0,9\n");
        assert!(matches!(
            load_longitudinal_csv(&p),
            Err(Error::Parse { row: 1, .. })
        ));
        let p = write(&dir, "m.csv", "subject_id,time\ns1,0\n");
        assert!(matches!(
            load_longitudinal_csv(&p),
            Err(Error::Header { .. })
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_longitudinal_csv("/nonexistent/x.csv"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn survival_parse_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "s.csv",
            "subject_id,event_time,status,trt\ns1,5.2,1,1\n",
        );
        let t = load_survival_csv(&p).unwrap();
        assert_eq!(t.covariate_names, vec!["trt"]);
        assert!(t.rows[0].event);
        assert_eq!(t.rows[0].covariates, vec![1.0]);

        let p = write(
            &dir,
            "n.csv",
            "subject_id,event_time,status,trt\ns1,-1.0,0,1\n",
        );
        assert!(matches!(
            load_survival_csv(&p),
            Err(Error::Parse { row: 1, .. })
        ));

        let p = write(
            &dir,
            "d.csv",
            "subject_id,event_time,status,trt\ns1,1,0,1\ns1,2,1,0\n",
        );
        match load_survival_csv(&p) {
            Err(Error::Parse { row, message, .. }) => {
                assert_eq!(row, 2);
                assert!(message.contains("duplicate"));
            }
            other => panic!("unexpected {other:?}"),
        }

        let p = write(
            &dir,
            "b.csv",
            "subject_id,event_time,status,trt\ns1,1,2,1\n",
        );
        assert!(load_survival_csv(&p).is_err());

        let p = write(&dir, "m.csv", "subject_id,event_time,status,trt\ns1,1,1,\n");
        assert!(load_survival_csv(&p).is_err());
    }

    #[test]
    fn assemble_cases() {
        let surv = SurvivalTable {
            covariate_names: vec![],
            rows: vec![SurvivalRow {
                subject_id: "s1".into(),
                event_time: 5.0,
                event: true,
                covariates: vec![],
            }],
        };
        let obs = |t: f64| LongitudinalObservation {
            subject_id: "s1".into(),
            time: t,
            value: 1.0,
        };
        let ds = assemble_dataset(&[obs(1.0), obs(0.0)], &surv).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.subjects()[0].observations.len(), 2);
        assert_eq!(ds.subjects()[0].observations[0].time, 0.0);

        let err = assemble_dataset(&[obs(0.0), obs(6.0)], &surv).unwrap_err();
        assert!(err.to_string().contains("observation after event time"));

        // tie with the event time is allowed
        assert!(assemble_dataset(&[obs(0.0), obs(5.0)], &surv).is_ok());

        let mut surv2 = surv.clone();
        surv2.rows.push(SurvivalRow {
            subject_id: "s2".into(),
            event_time: 3.0,
            event: false,
            covariates: vec![],
        });
        assert!(assemble_dataset(&[obs(0.0)], &surv2).is_err());

        let orphan = LongitudinalObservation {
            subject_id: "zz".into(),
            time: 0.0,
            value: 1.0,
        };
        assert!(assemble_dataset(&[obs(0.0), orphan], &surv).is_err());
        assert!(assemble_dataset(&[obs(1.0), obs(1.0)], &surv).is_err());
    }

    #[test]
    fn risk_set_definition() {
        let ds = Dataset::new(
            vec![
                subject("a", 3.0, true, &[(0.0, 1.0)]),
                subject("b", 5.0, false, &[(0.0, 1.0)]),
                subject("c", 7.0, true, &[(0.0, 1.0)]),
            ],
            vec![],
        )
        .unwrap();
        assert_eq!(risk_set_ids(&ds, 4.0), vec!["b", "c"]);
        assert_eq!(risk_set(&ds, 0.0).len(), 3);
        assert!(risk_set(&ds, 7.0).is_empty());
    }

    #[test]
    fn history_truncation() {
        let s = subject("a", 9.0, true, &[(0.0, 1.0), (2.0, 2.0), (4.0, 3.0)]);
        assert_eq!(s.history_until(2.0).len(), 2);
        assert_eq!(s.history_until(1.9).len(), 1);
        assert_eq!(s.truncated(10.0).observations.len(), 3);
    }
}
