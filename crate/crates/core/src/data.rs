//! Sparse irregular longitudinal observations and their CSV form.
//!
//! The canonical on-disk layout is long format with the header
//! `subject_id,process_id,time,value`; process ids are 1-based in files and
//! 0-based in memory. An optional JSON sidecar declares the process count,
//! the process intervals and labels.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FgccaError, Result};

/// Observations of one process for one subject.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseSample {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl SparseSample {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let s = Self { times, values };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.times.len() != self.values.len() {
            return Err(FgccaError::InvalidDataset(format!(
                "{} times but {} values",
                self.times.len(),
                self.values.len()
            )));
        }
        if self.times.iter().chain(&self.values).any(|v| !v.is_finite()) {
            return Err(FgccaError::InvalidDataset("non-finite observation".into()));
        }
        if self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(FgccaError::InvalidDataset(
                "observation times not strictly increasing".into(),
            ));
        }
        Ok(())
    }
}

/// All observations of one subject, one sample per process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub samples: Vec<SparseSample>,
}

/// Optional JSON sidecar accompanying a CSV file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    #[serde(default)]
    pub n_processes: Option<usize>,
    #[serde(default)]
    pub intervals: Option<Vec<[f64; 2]>>,
    #[serde(default)]
    pub labels: Option<Vec<String>>,
}

impl Sidecar {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    intervals: Vec<(f64, f64)>,
    labels: Vec<String>,
    subjects: Vec<SubjectRecord>,
}

impl LongitudinalDataset {
    /// Builds a dataset and checks every sample invariant. Processes may be
    /// empty here; estimation entry points call [`Self::require_observed`].
    pub fn new(intervals: Vec<(f64, f64)>, labels: Option<Vec<String>>, subjects: Vec<SubjectRecord>) -> Result<Self> {
        let n_proc = intervals.len();
        if n_proc == 0 {
            return Err(FgccaError::InvalidDataset("no processes".into()));
        }
        for (j, &(a, b)) in intervals.iter().enumerate() {
            if !(a.is_finite() && b.is_finite() && b > a) {
                return Err(FgccaError::InvalidDataset(format!(
                    "process {} has invalid interval [{a}, {b}]",
                    j + 1
                )));
            }
        }
        let labels = match labels {
            Some(l) if l.len() == n_proc => l,
            Some(l) => {
                return Err(FgccaError::InvalidDataset(format!(
                    "{} labels for {n_proc} processes",
                    l.len()
                )))
            }
            None => (1..=n_proc).map(|j| format!("process_{j}")).collect(),
        };
        let mut seen = std::collections::HashSet::new();
        for s in &subjects {
            if !seen.insert(s.id.as_str()) {
                return Err(FgccaError::InvalidDataset(format!("subject {} appears twice", s.id)));
            }
            if s.samples.len() != n_proc {
                return Err(FgccaError::InvalidDataset(format!(
                    "subject {} has {} process samples, expected {n_proc}",
                    s.id,
                    s.samples.len()
                )));
            }
            for (j, sample) in s.samples.iter().enumerate() {
                sample.validate()?;
                let (a, b) = intervals[j];
                if let Some(t) = sample.times.iter().find(|&&t| t < a || t > b) {
                    return Err(FgccaError::InvalidDataset(format!(
                        "subject {} process {}: time {t} outside [{a}, {b}]",
                        s.id,
                        j + 1
                    )));
                }
            }
        }
        Ok(Self {
            intervals,
            labels,
            subjects,
        })
    }

    pub fn n_processes(&self) -> usize {
        self.intervals.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn subjects(&self) -> &[SubjectRecord] {
        &self.subjects
    }

    pub fn sample(&self, subject: usize, process: usize) -> &SparseSample {
        &self.subjects[subject].samples[process]
    }

    pub fn subject_index(&self, id: &str) -> Option<usize> {
        self.subjects.iter().position(|s| s.id == id)
    }

    /// Every process must carry at least one observation.
    pub fn require_observed(&self) -> Result<()> {
        for j in 0..self.n_processes() {
            if self.subjects.iter().all(|s| s.samples[j].is_empty()) {
                return Err(FgccaError::InsufficientData {
                    process: j,
                    message: "no observations".into(),
                });
            }
        }
        Ok(())
    }

    /// Same subjects and intervals, with the given samples removed or replaced.
    pub fn map_samples(&self, mut f: impl FnMut(usize, usize, &SparseSample) -> SparseSample) -> Result<Self> {
        let subjects = self
            .subjects
            .iter()
            .enumerate()
            .map(|(i, s)| SubjectRecord {
                id: s.id.clone(),
                samples: s.samples.iter().enumerate().map(|(j, smp)| f(i, j, smp)).collect(),
            })
            .collect();
        Self::new(self.intervals.clone(), Some(self.labels.clone()), subjects)
    }

    /// Writes the canonical long-format CSV.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["subject_id", "process_id", "time", "value"])
            .map_err(csv_io)?;
        for s in &self.subjects {
            for (j, sample) in s.samples.iter().enumerate() {
                for (t, v) in sample.times.iter().zip(&sample.values) {
                    w.write_record([s.id.clone(), (j + 1).to_string(), format!("{t:?}"), format!("{v:?}")])
                        .map_err(csv_io)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn sidecar(&self) -> Sidecar {
        Sidecar {
            n_processes: Some(self.n_processes()),
            intervals: Some(self.intervals.iter().map(|&(a, b)| [a, b]).collect()),
            labels: Some(self.labels.clone()),
        }
    }
}

fn csv_io(e: csv::Error) -> FgccaError {
    FgccaError::Io(std::io::Error::other(e.to_string()))
}

/// Loads a long-format CSV file.
pub fn load_csv(path: impl AsRef<Path>, sidecar: Option<&Sidecar>) -> Result<LongitudinalDataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, sidecar)
}

struct Row {
    line: u64,
    subject: String,
    process: usize,
    time: f64,
    value: f64,
}

/// Parses long-format CSV from any reader. Subjects keep the order of their
/// first appearance; times are sorted per subject and process.
pub fn read_csv<R: Read>(reader: R, sidecar: Option<&Sidecar>) -> Result<LongitudinalDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| FgccaError::Schema(e.to_string()))?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| FgccaError::Schema(format!("missing column `{name}`")))
    };
    let (c_subj, c_proc, c_time, c_val) = (col("subject_id")?, col("process_id")?, col("time")?, col("value")?);

    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        // header is line 1
        let line = k as u64 + 2;
        let rec = rec.map_err(|e| FgccaError::Parse {
            line,
            message: e.to_string(),
        })?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let parse_f = |c: usize, what: &str| -> Result<f64> {
            let raw = field(c);
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(FgccaError::Parse {
                    line,
                    message: format!("{what} `{raw}` is not a finite number"),
                }),
            }
        };
        let process: usize = field(c_proc).parse().map_err(|_| FgccaError::Parse {
            line,
            message: format!("process_id `{}` is not a positive integer", field(c_proc)),
        })?;
        if process == 0 {
            return Err(FgccaError::Parse {
                line,
                message: "process_id must be at least 1".into(),
            });
        }
        let subject = field(c_subj).to_string();
        if subject.is_empty() {
            return Err(FgccaError::Parse {
                line,
                message: "empty subject_id".into(),
            });
        }
        rows.push(Row {
            line,
            subject,
            process: process - 1,
            time: parse_f(c_time, "time")?,
            value: parse_f(c_val, "value")?,
        });
    }

    let observed_j = rows.iter().map(|r| r.process + 1).max().unwrap_or(0);
    let declared = sidecar.and_then(|s| {
        s.n_processes
            .or_else(|| s.intervals.as_ref().map(|v| v.len()))
            .or_else(|| s.labels.as_ref().map(|v| v.len()))
    });
    let n_proc = match declared {
        Some(d) if d < observed_j => {
            let r = rows.iter().find(|r| r.process >= d).expect("exists");
            return Err(FgccaError::Range {
                line: r.line,
                message: format!("process_id {} exceeds declared count {d}", r.process + 1),
            });
        }
        Some(d) => d,
        None => observed_j,
    };
    if n_proc == 0 {
        return Err(FgccaError::InvalidDataset(
            "no observations and no declared processes".into(),
        ));
    }

    let intervals: Vec<(f64, f64)> = match sidecar.and_then(|s| s.intervals.as_ref()) {
        Some(iv) => {
            if iv.len() != n_proc {
                return Err(FgccaError::Schema(format!(
                    "sidecar declares {} intervals for {n_proc} processes",
                    iv.len()
                )));
            }
            let iv: Vec<(f64, f64)> = iv.iter().map(|p| (p[0], p[1])).collect();
            for r in &rows {
                let (a, b) = iv[r.process];
                if r.time < a || r.time > b {
                    return Err(FgccaError::Range {
                        line: r.line,
                        message: format!(
                            "time {} outside declared interval [{a}, {b}] of process {}",
                            r.time,
                            r.process + 1
                        ),
                    });
                }
            }
            iv
        }
        None => (0..n_proc)
            .map(|j| {
                let (lo, hi) = rows
                    .iter()
                    .filter(|r| r.process == j)
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                        (lo.min(r.time), hi.max(r.time))
                    });
                if lo.is_finite() && hi > lo {
                    Ok((lo, hi))
                } else {
                    Err(FgccaError::InvalidDataset(format!(
                        "cannot infer an interval for process {}; declare it in a sidecar",
                        j + 1
                    )))
                }
            })
            .collect::<Result<_>>()?,
    };

    let mut order: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut cells: Vec<Vec<Vec<(f64, f64, u64)>>> = Vec::new();
    for r in rows {
        let i = *index.entry(r.subject.clone()).or_insert_with(|| {
            order.push(r.subject.clone());
            cells.push(vec![Vec::new(); n_proc]);
            order.len() - 1
        });
        cells[i][r.process].push((r.time, r.value, r.line));
    }

    let mut subjects = Vec::with_capacity(order.len());
    for (id, per_proc) in order.into_iter().zip(cells) {
        let mut samples = Vec::with_capacity(n_proc);
        for (j, mut obs) in per_proc.into_iter().enumerate() {
            obs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));
            if let Some(w) = obs.windows(2).find(|w| w[0].0 == w[1].0) {
                return Err(FgccaError::Duplicate {
                    line: w[1].2,
                    message: format!(
                        "subject {id} process {} time {} already seen on line {}",
                        j + 1,
                        w[1].0,
                        w[0].2
                    ),
                });
            }
            samples.push(SparseSample {
                times: obs.iter().map(|o| o.0).collect(),
                values: obs.iter().map(|o| o.1).collect(),
            });
        }
        subjects.push(SubjectRecord { id, samples });
    }
    let labels = sidecar.and_then(|s| s.labels.clone());
    LongitudinalDataset::new(intervals, labels, subjects)
}

/// Per-process observation counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessSummary {
    pub process: usize,
    pub label: String,
    /// Subjects with at least one observation of this process.
    pub n_subjects: usize,
    pub n_observations: usize,
    pub min_count: usize,
    pub median_count: f64,
    pub max_count: usize,
    pub time_range: Option<(f64, f64)>,
}

/// Counts are taken over subjects that observe the process at least once.
pub fn summarize(dataset: &LongitudinalDataset) -> Vec<ProcessSummary> {
    (0..dataset.n_processes())
        .map(|j| {
            let mut counts: Vec<usize> = dataset
                .subjects()
                .iter()
                .map(|s| s.samples[j].len())
                .filter(|&n| n > 0)
                .collect();
            counts.sort_unstable();
            let median = match counts.len() {
                0 => 0.0,
                n if n % 2 == 1 => counts[n / 2] as f64,
                n => (counts[n / 2 - 1] + counts[n / 2]) as f64 / 2.0,
            };
            let range = dataset
                .subjects()
                .iter()
                .flat_map(|s| s.samples[j].times.iter().copied())
                .fold(None, |acc: Option<(f64, f64)>, t| match acc {
                    None => Some((t, t)),
                    Some((lo, hi)) => Some((lo.min(t), hi.max(t))),
                });
            ProcessSummary {
                process: j + 1,
                label: dataset.labels()[j].clone(),
                n_subjects: counts.len(),
                n_observations: counts.iter().sum(),
                min_count: counts.first().copied().unwrap_or(0),
                median_count: median,
                max_count: counts.last().copied().unwrap_or(0),
                time_range: range,
            }
        })
        .collect()
}

/// Subject id → row of a numeric response table, in the CSV's column order.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseTable {
    pub columns: Vec<String>,
    pub rows: BTreeMap<String, Vec<f64>>,
}

/// Reads a response CSV: `subject_id` plus one or more numeric columns.
pub fn read_response_csv<R: Read>(reader: R) -> Result<ResponseTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| FgccaError::Schema(e.to_string()))?.clone();
    let c_subj = headers
        .iter()
        .position(|h| h == "subject_id")
        .ok_or_else(|| FgccaError::Schema("missing column `subject_id`".into()))?;
    let value_cols: Vec<usize> = (0..headers.len()).filter(|&c| c != c_subj).collect();
    if value_cols.is_empty() {
        return Err(FgccaError::Schema("response has no value columns".into()));
    }
    let columns = value_cols.iter().map(|&c| headers[c].to_string()).collect();
    let mut rows = BTreeMap::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k as u64 + 2;
        let rec = rec.map_err(|e| FgccaError::Parse {
            line,
            message: e.to_string(),
        })?;
        let id = rec.get(c_subj).unwrap_or("").to_string();
        let mut vals = Vec::with_capacity(value_cols.len());
        for &c in &value_cols {
            let raw = rec.get(c).unwrap_or("");
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => vals.push(v),
                _ => {
                    return Err(FgccaError::Parse {
                        line,
                        message: format!("`{raw}` in column {} is not a finite number", &headers[c]),
                    })
                }
            }
        }
        if rows.insert(id.clone(), vals).is_some() {
            return Err(FgccaError::Duplicate {
                line,
                message: format!("subject {id} listed twice"),
            });
        }
    }
    Ok(ResponseTable { columns, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<LongitudinalDataset> {
        read_csv(text.as_bytes(), None)
    }

    #[test]
    fn three_rows_one_subject() {
        let d = parse("subject_id,process_id,time,value\na,1,0.0,1.0\na,1,0.5,2.0\na,1,1.0,3.0\n").unwrap();
        assert_eq!(d.n_subjects(), 1);
        assert_eq!(d.n_processes(), 1);
        assert_eq!(d.sample(0, 0).len(), 3);
    }

    #[test]
    fn rows_out_of_order_are_sorted() {
        let sorted = parse("subject_id,process_id,time,value\na,1,0.0,1.0\na,1,0.5,2.0\na,1,1.0,3.0\n").unwrap();
        let shuffled = parse("subject_id,process_id,time,value\na,1,1.0,3.0\na,1,0.0,1.0\na,1,0.5,2.0\n").unwrap();
        assert_eq!(sorted, shuffled);
    }

    #[test]
    fn duplicate_row_is_rejected_with_line() {
        let err = parse("subject_id,process_id,time,value\na,1,0.0,1.0\na,1,0.5,2.0\na,1,0.0,3.0\n").unwrap_err();
        match err {
            FgccaError::Duplicate { line, .. } => assert_eq!(line, 4),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn schema_and_parse_errors() {
        assert!(matches!(
            parse("subject_id,process_id,value\na,1,1.0\n"),
            Err(FgccaError::Schema(_))
        ));
        match parse("subject_id,process_id,time,value\na,1,0.0,1.0\na,1,zz,2.0\n") {
            Err(FgccaError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn declared_interval_range_error() {
        let side = Sidecar {
            intervals: Some(vec![[0.0, 1.0]]),
            ..Default::default()
        };
        let err = read_csv(
            "subject_id,process_id,time,value\na,1,0.0,1.0\na,1,1.5,2.0\n".as_bytes(),
            Some(&side),
        )
        .unwrap_err();
        assert!(matches!(err, FgccaError::Range { line: 3, .. }));
    }

    #[test]
    fn summary_of_empty_process() {
        let side = Sidecar {
            n_processes: Some(2),
            intervals: Some(vec![[0.0, 1.0], [0.0, 1.0]]),
            labels: None,
        };
        let d = read_csv(
            "subject_id,process_id,time,value\na,1,0.0,1.0\na,1,0.5,2.0\nb,1,0.2,2.0\n".as_bytes(),
            Some(&side),
        )
        .unwrap();
        let s = summarize(&d);
        assert_eq!(s[1].n_subjects, 0);
        assert_eq!(s[1].min_count, 0);
        assert_eq!(s[1].max_count, 0);
        assert_eq!(s[1].median_count, 0.0);
        assert_eq!(s[0].n_subjects, 2);
        assert_eq!(s[0].median_count, 1.5);
        assert!(d.require_observed().is_err());
    }

    #[test]
    fn write_then_reload_is_identical() {
        let d = parse(
            "subject_id,process_id,time,value\nb,2,0.3,1.25\na,1,0.1,-2.0\na,2,0.7,0.1\nb,1,0.9,3.5\na,1,0.2,1e-3\n",
        )
        .unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let again = read_csv(buf.as_slice(), Some(&d.sidecar())).unwrap();
        assert_eq!(d, again);
    }

    #[test]
    fn response_table() {
        let t = read_response_csv("subject_id,y1,y2\na,1.0,2.0\nb,0.5,-1\n".as_bytes()).unwrap();
        assert_eq!(t.columns, vec!["y1", "y2"]);
        assert_eq!(t.rows["b"], vec![0.5, -1.0]);
    }
}
