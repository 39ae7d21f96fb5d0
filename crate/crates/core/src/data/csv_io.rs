use std::path::Path;

use crate::error::{Error, Result};
use crate::report::fmt_g9;

use super::DatasetShard;

/// Reads `label,f0,...,f{d-1}` rows. Line numbers in errors are 1-based and
/// count the header.
pub fn load_csv(path: &Path, class_count: usize) -> Result<DatasetShard> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => parse_err(1, format!("{other:?}")),
        })?;
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.get(0) != Some("label") || header.len() < 2 {
        return Err(parse_err(1, "header must be `label,f0,...`".into()));
    }
    for (i, name) in header.iter().skip(1).enumerate() {
        if name != format!("f{i}") {
            return Err(parse_err(1, format!("column {} should be `f{i}`, found `{name}`", i + 2)));
        }
    }
    let dim = header.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != dim + 1 {
            return Err(parse_err(line, format!("expected {} fields, found {}", dim + 1, record.len())));
        }
        let label: usize = record[0]
            .parse()
            .map_err(|_| parse_err(line, format!("invalid label `{}`", &record[0])))?;
        if label >= class_count {
            return Err(parse_err(line, format!("label {label} >= class count {class_count}")));
        }
        for field in record.iter().skip(1) {
            let v: f32 = field
                .parse()
                .map_err(|_| parse_err(line, format!("invalid value `{field}`")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite value `{field}`")));
            }
            features.push(v);
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    DatasetShard::from_flat(vec![dim], features, labels, class_count)
}

/// Writes a shard in the format `load_csv` reads, floats at nine significant digits.
pub fn write_csv(path: &Path, shard: &DatasetShard) -> Result<()> {
    let mut out = String::from("label");
    for i in 0..shard.feature_dim() {
        out.push_str(&format!(",f{i}"));
    }
    out.push('\n');
    for i in 0..shard.len() {
        out.push_str(&shard.labels()[i].to_string());
        for &v in shard.sample(i) {
            out.push(',');
            out.push_str(&fmt_g9(f64::from(v)));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
