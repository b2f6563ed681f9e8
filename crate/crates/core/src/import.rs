//! Importers from common public dataset layouts into corpus JSONL.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::Deserialize;

use crate::corpus::{OfficialSplit, Report, Source, Split};
use crate::error::{Error, Result};

#[derive(Debug, Deserialize)]
struct AnnotationEntry {
    id: serde_json::Value,
    report: String,
    image_path: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct Annotation {
    #[serde(default)]
    train: Vec<AnnotationEntry>,
    #[serde(default, alias = "validation")]
    val: Vec<AnnotationEntry>,
    #[serde(default)]
    test: Vec<AnnotationEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Imported {
    pub reports: Vec<Report>,
    /// Ids dropped for an empty report or no images.
    pub skipped: Vec<String>,
}

fn id_string(v: &serde_json::Value) -> Result<String> {
    match v {
        serde_json::Value::String(s) => Ok(s.clone()),
        serde_json::Value::Number(n) => Ok(n.to_string()),
        other => Err(Error::Schema(format!(
            "annotation id must be a string or number, got {other}"
        ))),
    }
}

/// Reads an `annotation.json` with `train`/`val`/`test` arrays of
/// `{"id", "report", "image_path": [..]}` entries. Image paths are joined
/// onto `images_root` when given. Splits come from the array each entry
/// sits in.
pub fn import_annotation(text: &str, source: Source, images_root: Option<&Path>) -> Result<Imported> {
    let ann: Annotation = serde_json::from_str(text).map_err(|e| Error::Schema(format!("annotation: {e}")))?;
    let mut out = Imported {
        reports: Vec::new(),
        skipped: Vec::new(),
    };
    let mut seen = HashSet::new();
    for (split, entries) in [
        (Split::Train, ann.train),
        (Split::Validation, ann.val),
        (Split::Test, ann.test),
    ] {
        for e in entries {
            let id = id_string(&e.id)?;
            if !seen.insert(id.clone()) {
                return Err(Error::Schema(format!("annotation lists id {id} more than once")));
            }
            let report_text = crate::corpus::normalize_whitespace(&e.report);
            if report_text.is_empty() || e.image_path.is_empty() {
                out.skipped.push(id);
                continue;
            }
            let image_refs = e
                .image_path
                .iter()
                .map(|p| match images_root {
                    Some(root) => root.join(p).to_string_lossy().into_owned(),
                    None => p.clone(),
                })
                .collect();
            out.reports.push(Report {
                id,
                image_refs,
                report_text,
                source,
                split,
            });
        }
    }
    Ok(out)
}

/// Converts a split CSV such as `mimic-cxr-2.0.0-split.csv` into an
/// official split listing. `id_column` names the column whose values match
/// report ids; rows sharing an id (several images per study) collapse to
/// one entry. Split values `train`, `validate`/`validation`/`val` and
/// `test` are recognised.
pub fn official_split_from_csv(text: &str, id_column: &str) -> Result<OfficialSplit> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Schema(format!("split csv: {e}")))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("split csv has no {name:?} column")))
    };
    let (id_col, split_col) = (col(id_column)?, col("split")?);
    let mut listing = OfficialSplit::default();
    let mut seen: HashMap<String, Split> = HashMap::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Schema(format!("split csv row {}: {e}", i + 2)))?;
        let id = row.get(id_col).unwrap_or_default().to_string();
        let split = match row.get(split_col).unwrap_or_default() {
            "train" => Split::Train,
            "validate" | "validation" | "val" => Split::Validation,
            "test" => Split::Test,
            other => {
                return Err(Error::Schema(format!(
                    "split csv row {}: unknown split {other:?}",
                    i + 2
                )));
            }
        };
        match seen.get(&id) {
            Some(&prev) if prev != split => {
                return Err(Error::Schema(format!(
                    "split csv row {}: {id} is listed under both {prev} and {split}",
                    i + 2
                )));
            }
            Some(_) => {}
            None => {
                seen.insert(id.clone(), split);
                match split {
                    Split::Train => listing.train.push(id),
                    Split::Validation => listing.validation.push(id),
                    _ => listing.test.push(id),
                }
            }
        }
    }
    Ok(listing)
}

/// Imports an annotation file and writes the corpus JSONL to `out`.
pub fn import_annotation_file(path: &Path, source: Source, images_root: Option<&Path>, out: &Path) -> Result<Imported> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let imported = import_annotation(&text, source, images_root).map_err(|e| match e {
        Error::Schema(msg) => Error::Schema(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    crate::io::write_jsonl(out, &imported.reports)?;
    Ok(imported)
}

/// Converts a split CSV file and writes the listing JSON to `out`.
pub fn split_csv_file(path: &Path, id_column: &str, out: &Path) -> Result<OfficialSplit> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let listing = official_split_from_csv(&text, id_column).map_err(|e| match e {
        Error::Schema(msg) => Error::Schema(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    crate::io::write_json(out, &listing)?;
    Ok(listing)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn annotation_layout() {
        let text = r#"{
            "train": [{"id": "CXR1_1_IM-0001", "report": "The heart is normal.  No effusion.", "image_path": ["CXR1/0.png", "CXR1/1.png"], "split": "train"}],
            "val": [{"id": 7, "report": "Clear lungs.", "image_path": ["a.jpg"]}],
            "test": [{"id": "t", "report": "  ", "image_path": ["b.jpg"]}, {"id": "u", "report": "x", "image_path": []}]
        }"#;
        let got = import_annotation(text, Source::IuXray, Some(Path::new("/data/iu"))).unwrap();
        assert_eq!(got.skipped, vec!["t", "u"]);
        assert_eq!(got.reports.len(), 2);
        assert_eq!(got.reports[0].report_text, "The heart is normal. No effusion.");
        assert_eq!(got.reports[0].image_refs[1], "/data/iu/CXR1/1.png");
        assert_eq!(got.reports[0].split, Split::Train);
        assert_eq!(got.reports[1].id, "7");
        assert_eq!(got.reports[1].split, Split::Validation);
        let jsonl = crate::io::to_jsonl(&got.reports);
        assert_eq!(crate::corpus::parse_corpus(&jsonl).unwrap(), got.reports);
    }

    #[test]
    fn annotation_duplicate_ids() {
        let text = r#"{"train": [{"id": "a", "report": "x", "image_path": ["p"]}], "test": [{"id": "a", "report": "y", "image_path": ["q"]}]}"#;
        assert_eq!(
            import_annotation(text, Source::MimicCxr, None).unwrap_err().exit_code(),
            2
        );
    }

    #[test]
    fn split_csv() {
        let text =
            "dicom_id,study_id,subject_id,split\nd1,50,10,train\nd2,50,10,train\nd3,51,10,validate\nd4,52,11,test\n";
        let by_study = official_split_from_csv(text, "study_id").unwrap();
        assert_eq!(by_study.train, vec!["50"]);
        assert_eq!(by_study.validation, vec!["51"]);
        assert_eq!(by_study.test, vec!["52"]);
        let by_dicom = official_split_from_csv(text, "dicom_id").unwrap();
        assert_eq!(by_dicom.train, vec!["d1", "d2"]);
        assert!(official_split_from_csv(text, "nope").is_err());
        assert!(official_split_from_csv("id,split\na,holdout\n", "id").is_err());
        let err = official_split_from_csv("id,split\na,train\na,test\n", "id").unwrap_err();
        assert!(err.to_string().contains("both train and test"), "{err}");
    }
}
