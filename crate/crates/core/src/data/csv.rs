use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DatasetSplit, Partition, SensorSample};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::TIME_STEPS;
use crate::tensor::Tensor;

/// Column layout: `id,t,f0..f{F-1},label_task1..label_task{K}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub num_features: usize,
    pub num_tasks: usize,
}

impl CsvSchema {
    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["id".to_string(), "t".to_string()];
        h.extend((0..self.num_features).map(|i| format!("f{i}")));
        h.extend((1..=self.num_tasks).map(|k| format!("label_task{k}")));
        h
    }
}

/// One CSV file per partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPaths {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
}

impl SplitPaths {
    pub fn in_dir(dir: &Path) -> Self {
        SplitPaths {
            train: dir.join("train.csv"),
            valid: dir.join("valid.csv"),
            test: dir.join("test.csv"),
        }
    }

    pub fn get(&self, p: Partition) -> &Path {
        match p {
            Partition::Train => &self.train,
            Partition::Valid => &self.valid,
            Partition::Test => &self.test,
        }
    }
}

struct Row {
    line: u64,
    t: u64,
    values: Vec<f64>,
    labels: Vec<Option<bool>>,
}

/// Reads one partition file, pairing rows that share an id into samples
/// ordered by `t`. Samples keep the order in which their id first appears.
pub fn read_samples(path: &Path, schema: &CsvSchema) -> Result<Vec<SensorSample>> {
    let mut reader = ::csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let expected = schema.header();
    if header != expected {
        return Err(Error::parse(
            path,
            format!(
                "header mismatch: expected {} columns starting {:?}, found {:?}",
                expected.len(),
                &expected[..expected.len().min(4)],
                header
            ),
        ));
    }

    let f = schema.num_features;
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Row>> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let cell = |i: usize| record.get(i).unwrap_or("");
        let id = cell(0).to_string();
        let t: u64 = cell(1).trim().parse().map_err(|_| {
            Error::parse(path, format!("line {line}: time index {:?} is not an integer", cell(1)))
        })?;
        let values = (0..f)
            .map(|j| {
                cell(2 + j).trim().parse::<f64>().map_err(|_| {
                    Error::parse(
                        path,
                        format!("line {line}: f{j} value {:?} is not numeric", cell(2 + j)),
                    )
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let labels = (0..schema.num_tasks)
            .map(|k| match cell(2 + f + k).trim() {
                "" => Ok(None),
                "0" => Ok(Some(false)),
                "1" => Ok(Some(true)),
                other => Err(Error::parse(
                    path,
                    format!("line {line}: label_task{} value {other:?} is not 0, 1 or empty", k + 1),
                )),
            })
            .collect::<Result<Vec<_>>>()?;
        let group = groups.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Vec::new()
        });
        if let Some(prev) = group.iter().find(|r| r.t == t) {
            return Err(Error::parse(
                path,
                format!("line {line}: duplicate (id {id}, t {t}), first seen on line {}", prev.line),
            ));
        }
        group.push(Row {
            line,
            t,
            values,
            labels,
        });
    }

    order
        .into_iter()
        .map(|id| {
            let mut rows = groups.remove(&id).expect("every ordered id has a group");
            if rows.len() != TIME_STEPS {
                let lines: Vec<u64> = rows.iter().map(|r| r.line).collect();
                return Err(Error::parse(
                    path,
                    format!(
                        "id {id} has {} rows (lines {lines:?}), expected {TIME_STEPS}",
                        rows.len()
                    ),
                ));
            }
            rows.sort_by_key(|r| r.t);
            let labels = rows[0].labels.clone();
            if rows.iter().any(|r| r.labels != labels) {
                return Err(Error::parse(
                    path,
                    format!("id {id}: labels differ between its rows"),
                ));
            }
            let data = rows.into_iter().flat_map(|r| r.values).collect();
            SensorSample::new(id, Tensor::new(&[TIME_STEPS, f], data)?, labels)
                .map_err(|e| Error::parse(path, e.to_string()))
        })
        .collect()
}

/// Loads the three partition files into a validated split.
pub fn load_csv(paths: &SplitPaths, schema: &CsvSchema) -> Result<DatasetSplit> {
    let mut split = DatasetSplit {
        num_features: schema.num_features,
        num_tasks: schema.num_tasks,
        ..Default::default()
    };
    for p in Partition::ALL {
        *split.part_mut(p) = read_samples(paths.get(p), schema)?;
    }
    split.validate()?;
    Ok(split)
}

pub fn write_samples(path: &Path, schema: &CsvSchema, samples: &[SensorSample]) -> Result<()> {
    let mut w = ::csv::Writer::from_writer(Vec::new());
    let io_err = |e: ::csv::Error| Error::Argument(format!("csv encoding failed: {e}"));
    w.write_record(schema.header()).map_err(io_err)?;
    let f = schema.num_features;
    for s in samples {
        for (t, row) in s.values.data().chunks(f).enumerate() {
            let mut rec = vec![s.id.clone(), t.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            rec.extend(s.labels.iter().map(|l| match l {
                None => String::new(),
                Some(false) => "0".into(),
                Some(true) => "1".into(),
            }));
            w.write_record(&rec).map_err(io_err)?;
        }
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Argument(format!("csv encoding failed: {e}")))?;
    write_atomic(path, &bytes)
}

/// Writes `train.csv`, `valid.csv` and `test.csv` under `dir`.
pub fn write_csv(split: &DatasetSplit, dir: &Path) -> Result<SplitPaths> {
    let schema = CsvSchema {
        num_features: split.num_features,
        num_tasks: split.num_tasks,
    };
    let paths = SplitPaths::in_dir(dir);
    for p in Partition::ALL {
        write_samples(paths.get(p), &schema, split.part(p))?;
    }
    Ok(paths)
}

fn csv_error(path: &Path, e: ::csv::Error) -> Error {
    if let ::csv::ErrorKind::Io(_) = e.kind() {
        match e.into_kind() {
            ::csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::parse(path, e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    const SCHEMA: CsvSchema = CsvSchema {
        num_features: 2,
        num_tasks: 2,
    };

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn two_rows_make_one_sample() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "a.csv",
            "id,t,f0,f1,label_task1,label_task2\nw1,1,3,4,1,\nw1,0,1,2,1,\n",
        );
        let s = read_samples(&p, &SCHEMA).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].values.shape(), &[2, 2]);
        assert_eq!(s[0].values.data(), &[1., 2., 3., 4.]);
        assert_eq!(s[0].labels, vec![Some(true), None]);
    }

    #[test]
    fn header_only_gives_empty_split() {
        let dir = tempfile::tempdir().unwrap();
        let header = "id,t,f0,f1,label_task1,label_task2\n";
        for n in ["train.csv", "valid.csv", "test.csv"] {
            write(dir.path(), n, header);
        }
        let split = load_csv(&SplitPaths::in_dir(dir.path()), &SCHEMA).unwrap();
        assert!(split.train.is_empty() && split.valid.is_empty() && split.test.is_empty());
        assert!(split
            .counts(Partition::Train)
            .iter()
            .all(|c| c.pos == 0 && c.neg == 0));
    }

    #[test]
    fn malformed_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let cases = [
            ("id,t,f0,label_task1,label_task2\n", "header"),
            ("id,t,f0,f1,label_task1,label_task2\nw,0,x,1,0,0\nw,1,1,1,0,0\n", "not numeric"),
            ("id,t,f0,f1,label_task1,label_task2\nw,0,1,1,0,0\nw,0,1,1,0,0\n", "duplicate"),
            ("id,t,f0,f1,label_task1,label_task2\nw,0,1,1,0,0\nv,0,1,1,0,0\nv,1,1,1,0,0\n", "lines [2]"),
            ("id,t,f0,f1,label_task1,label_task2\nw,0,1,1,2,0\nw,1,1,1,2,0\n", "label_task1"),
        ];
        for (i, (body, needle)) in cases.iter().enumerate() {
            let p = write(dir.path(), &format!("bad{i}.csv"), body);
            let err = read_samples(&p, &SCHEMA).unwrap_err();
            assert!(matches!(err, Error::Parse { .. }), "{err}");
            assert!(err.to_string().contains(needle), "{needle}: {err}");
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = read_samples(Path::new("/nonexistent/x.csv"), &SCHEMA).unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err}");
    }
}
