use std::path::Path;

use crate::data::{cascade_violation, describe_violations, CascadeDataset, DatasetSchema, Violation};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

/// A dataset read from CSV plus the number of ids remapped to 0 because
/// they fell outside their field's vocabulary.
#[derive(Debug)]
pub struct Loaded {
    pub dataset: CascadeDataset,
    pub oov: usize,
}

/// Reads `f_<field>...,y_<task>...` rows against `schema`.
///
/// Header and column order must match the schema exactly. Line numbers in
/// errors count the header as line 1.
pub fn load_csv_dataset(path: &Path, schema: &DatasetSchema) -> Result<Loaded> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub(crate) fn read_csv(input: impl std::io::Read, schema: &DatasetSchema) -> Result<Loaded> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let mut records = reader.records();
    let expected = schema.header();

    let header = match records.next() {
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "missing header row".into(),
            })
        }
        Some(r) => r.map_err(|e| csv_error(e, 1))?,
    };
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::Validation(format!(
            "CSV header {:?} does not match the configured schema {:?}",
            got, expected
        )));
    }

    let (f, m) = (schema.num_fields(), schema.num_tasks());
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut violations = Vec::new();
    let mut oov = 0;
    let mut row_labels = vec![0u8; m];
    for (row, record) in records.enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| csv_error(e, line))?;
        let line = record.position().map_or(line, |p| p.line() as usize);
        if record.len() != f + m {
            return Err(Error::Parse {
                line,
                message: format!("expected {} columns, found {}", f + m, record.len()),
            });
        }
        for (col, (raw, &vocab)) in record.iter().zip(schema.vocab_sizes()).enumerate() {
            let id: u32 = raw.trim().parse().map_err(|_| Error::Parse {
                line,
                message: format!("column {}: {raw:?} is not a non-negative integer id", expected[col]),
            })?;
            if id as usize >= vocab {
                oov += 1;
                features.push(0);
            } else {
                features.push(id);
            }
        }
        for (t, raw) in record.iter().skip(f).enumerate() {
            row_labels[t] = match raw.trim() {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(Error::Parse {
                        line,
                        message: format!("column {}: label {other:?} is not 0 or 1", expected[f + t]),
                    })
                }
            };
        }
        if let Some(task) = cascade_violation(&row_labels) {
            violations.push(Violation { row: row + 1, task });
        }
        labels.extend_from_slice(&row_labels);
    }
    if !violations.is_empty() {
        return Err(Error::Validation(describe_violations(&violations)));
    }
    let dataset = if labels.is_empty() {
        CascadeDataset::empty(schema.clone())
    } else {
        CascadeDataset::new(schema.clone(), features, labels)?
    };
    Ok(Loaded { dataset, oov })
}

fn csv_error(e: csv::Error, line: usize) -> Error {
    let line = e.position().map_or(line, |p| p.line() as usize);
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

/// Serializes a dataset in the format read by [`load_csv_dataset`].
pub fn encode_csv(dataset: &CascadeDataset) -> Vec<u8> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(dataset.schema().header())
        .expect("in-memory write");
    let mut record: Vec<String> = Vec::new();
    for i in 0..dataset.len() {
        record.clear();
        record.extend(dataset.features(i).iter().map(u32::to_string));
        record.extend(dataset.labels(i).iter().map(u8::to_string));
        writer.write_record(&record).expect("in-memory write");
    }
    writer.into_inner().expect("in-memory flush")
}

pub fn write_csv_dataset(dataset: &CascadeDataset, path: &Path) -> Result<()> {
    write_atomic(path, &encode_csv(dataset))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> DatasetSchema {
        DatasetSchema::new(
            vec!["user".into(), "item".into()],
            vec![5, 5],
            vec!["click".into(), "purchase".into()],
        )
        .unwrap()
    }

    fn read(text: &str) -> Result<Loaded> {
        read_csv(text.as_bytes(), &schema())
    }

    #[test]
    fn accepts_valid_label_pairs() {
        let loaded = read("f_user,f_item,y_click,y_purchase\n1,2,1,0\n0,0,0,0\n3,4,1,1\n").unwrap();
        assert_eq!(loaded.dataset.len(), 3);
        assert_eq!(loaded.dataset.labels(0), [1, 0]);
        assert_eq!(loaded.oov, 0);
    }

    #[test]
    fn rejects_downstream_positive_without_upstream() {
        let err = read("f_user,f_item,y_click,y_purchase\n1,2,1,0\n1,1,0,1\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("row 2"), "{err}");
    }

    #[test]
    fn header_only_is_empty_dataset() {
        let loaded = read("f_user,f_item,y_click,y_purchase\n").unwrap();
        assert!(loaded.dataset.is_empty());
    }

    #[test]
    fn malformed_rows_report_line() {
        let err = read("f_user,f_item,y_click,y_purchase\n1,2,1,0\n1,x,0,0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = read("f_user,f_item,y_click,y_purchase\n1,2,1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = read("f_user,f_item,y_click,y_purchase\n1,2,2,0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn header_mismatch() {
        assert!(matches!(
            read("f_item,f_user,y_click,y_purchase\n"),
            Err(Error::Validation(_))
        ));
        assert!(matches!(read(""), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn out_of_vocabulary_ids_are_counted() {
        let loaded = read("f_user,f_item,y_click,y_purchase\n9,2,0,0\n5,7,1,0\n").unwrap();
        assert_eq!(loaded.oov, 3);
        assert_eq!(loaded.dataset.features(0), [0, 2]);
    }

    #[test]
    fn encode_then_read() {
        let ds = read("f_user,f_item,y_click,y_purchase\n1,2,1,0\n4,0,1,1\n").unwrap().dataset;
        let text = encode_csv(&ds);
        assert_eq!(read(std::str::from_utf8(&text).unwrap()).unwrap().dataset, ds);
    }
}
