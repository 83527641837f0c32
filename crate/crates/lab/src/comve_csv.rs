//! Ingestion of the ComVE CSV release: one file of statement pairs and an
//! optional file of candidate reasons, joined by id.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use comve_core::data::{ComveInstance, DatasetSplit, Provenance, SplitName};
use comve_core::Error;

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))
}

fn parse_error(path: &Path, line: usize, message: impl std::fmt::Display) -> anyhow::Error {
    Error::Parse {
        line,
        message: format!("{}: {message}", path.display()),
    }
    .into()
}

/// Column positions by (case-insensitive) header name.
fn columns(path: &Path, headers: &csv::StringRecord, wanted: &[&str]) -> Result<Vec<Option<usize>>> {
    let find = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let cols: Vec<Option<usize>> = wanted.iter().map(|w| find(w)).collect();
    if let Some(i) = cols.iter().take(wanted.len() - 1).position(Option::is_none) {
        return Err(parse_error(path, 1, format!("missing column {}", wanted[i])));
    }
    Ok(cols)
}

fn rows(path: &Path, wanted: &[&str]) -> Result<Vec<(usize, Vec<String>, Option<String>)>> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(|e| parse_error(path, 1, e))?.clone();
    let cols = columns(path, &headers, wanted)?;
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_error(path, line, e)
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let fields = cols[..cols.len() - 1]
            .iter()
            .map(|c| record.get(c.expect("checked")).unwrap_or("").to_string())
            .collect();
        let label = cols[cols.len() - 1].and_then(|c| record.get(c)).map(str::to_string);
        out.push((line, fields, label));
    }
    Ok(out)
}

/// Reads `id,sent0,sent1,label` and, when given, `id,OptionA,OptionB,OptionC(,label)`.
///
/// The pair label names the statement against common sense and is kept as
/// `nonsense_index`. Reason labels may be letters (`A`–`C`) or indices.
pub fn load_comve(task_a: &Path, task_b: Option<&Path>, name: SplitName) -> Result<DatasetSplit> {
    let mut instances = Vec::new();
    let mut position = BTreeMap::new();
    for (line, fields, label) in rows(task_a, &["id", "sent0", "sent1", "label"])? {
        let label = label.ok_or_else(|| parse_error(task_a, line, "missing label"))?;
        let nonsense_index = match label.as_str() {
            "0" => 0,
            "1" => 1,
            other => return Err(parse_error(task_a, line, format!("label {other:?} is not 0 or 1"))),
        };
        let [id, s1, s2]: [String; 3] = fields.try_into().expect("three columns");
        position.insert(id.clone(), instances.len());
        instances.push(ComveInstance {
            id,
            s1,
            s2,
            nonsense_index,
            options: None,
            reason_index: None,
            provenance: Provenance::Original,
        });
    }
    if let Some(path) = task_b {
        let mut missing = Vec::new();
        for (line, fields, label) in rows(path, &["id", "OptionA", "OptionB", "OptionC", "label"])? {
            let [id, a, b, c]: [String; 4] = fields.try_into().expect("four columns");
            let reason = match label.as_deref().map(str::trim) {
                None | Some("") => None,
                Some("A" | "a" | "0") => Some(0),
                Some("B" | "b" | "1") => Some(1),
                Some("C" | "c" | "2") => Some(2),
                Some(other) => return Err(parse_error(path, line, format!("label {other:?} is not A, B or C"))),
            };
            match position.get(&id) {
                Some(&i) => {
                    instances[i].options = Some([a, b, c]);
                    instances[i].reason_index = reason;
                }
                None => missing.push(id),
            }
        }
        if !missing.is_empty() {
            return Err(Error::Join(missing).into());
        }
    }
    Ok(DatasetSplit::new(name, instances)?)
}
