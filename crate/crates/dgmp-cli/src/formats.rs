//! File formats: descriptor files, embedding/label CSVs, atomic writes.
//!
//! A descriptor file is plain text:
//!
//! ```text
//! dgmp-csv v1, D=3, N=2, label=scribe-a
//! 1,0,0.5
//! 0,1,-0.25
//! ```
//!
//! One descriptor per line (the loader transposes them into matrix columns);
//! the `label=` clause is optional. Values are written with 17 significant
//! digits so a write/read round trip reproduces every `f64` bit-exactly.

use std::fs;
use std::path::Path;

use dgmp::linalg::Matrix;
use dgmp::pooling::DescriptorSet;

use crate::CliError;

/// Serializes an `f64` with 17 significant digits (round-trip exact).
pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_err(path: &Path, line: usize, msg: impl std::fmt::Display) -> CliError {
    CliError::Parse(format!("{}:{}: {}", path.display(), line, msg))
}

/// Writes a descriptor set in `dgmp-csv v1` format.
pub fn write_descriptor_file(path: &Path, set: &DescriptorSet) -> Result<(), CliError> {
    let mut out = format!("dgmp-csv v1, D={}, N={}", set.dim(), set.len());
    if let Some(label) = &set.label {
        if label.contains([',', '\n']) {
            return Err(CliError::Parse(format!(
                "label '{label}' must not contain commas or newlines"
            )));
        }
        out.push_str(&format!(", label={label}"));
    }
    out.push('\n');
    for i in 0..set.len() {
        let column = set.descriptor(i);
        let row: Vec<String> = column.iter().map(|v| format_value(*v)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Reads a `dgmp-csv v1` descriptor file. The set's `source_id` is the file
/// stem.
pub fn read_descriptor_file(path: &Path) -> Result<DescriptorSet, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Parse(format!("{}: {}", path.display(), e)))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;

    let mut parts = header.split(", ");
    let magic = parts.next().unwrap_or_default();
    if magic != "dgmp-csv v1" {
        return Err(parse_err(path, 1, format!("bad header '{magic}'")));
    }
    let (mut dim, mut n, mut label) = (None, None, None);
    for part in parts {
        match part.split_once('=') {
            Some(("D", v)) => {
                dim = Some(v.parse::<usize>().map_err(|e| parse_err(path, 1, e))?)
            }
            Some(("N", v)) => n = Some(v.parse::<usize>().map_err(|e| parse_err(path, 1, e))?),
            Some(("label", v)) => label = Some(v.to_string()),
            _ => return Err(parse_err(path, 1, format!("unknown header field '{part}'"))),
        }
    }
    let dim = dim.ok_or_else(|| parse_err(path, 1, "missing D="))?;
    let n = n.ok_or_else(|| parse_err(path, 1, "missing N="))?;
    if dim == 0 || n == 0 {
        return Err(parse_err(path, 1, "D and N must be at least 1"));
    }

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let row = parse_value_row(line).map_err(|e| parse_err(path, idx + 1, e))?;
        if row.len() != dim {
            return Err(parse_err(
                path,
                idx + 1,
                format!("expected {dim} values, found {}", row.len()),
            ));
        }
        rows.push(row);
    }
    if rows.len() != n {
        return Err(parse_err(
            path,
            1,
            format!("header declares N={n} but body has {} descriptors", rows.len()),
        ));
    }
    let mut set = DescriptorSet::from_descriptor_rows(&rows)
        .map_err(|e| parse_err(path, 1, e))?;
    if let Some(label) = label {
        set = set.with_label(label);
    }
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    Ok(set.with_source_id(stem))
}

fn parse_value_row(line: &str) -> Result<Vec<f64>, String> {
    line.split(',')
        .map(|tok| {
            let v: f64 = tok
                .trim()
                .parse()
                .map_err(|e| format!("'{tok}': {e}"))?;
            if !v.is_finite() {
                return Err(format!("non-finite value '{tok}'"));
            }
            Ok(v)
        })
        .collect()
}

/// Reads an embeddings CSV (`id,v1,...,vD` per line, no header).
pub fn read_embeddings_csv(path: &Path) -> Result<(Vec<String>, Matrix), CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Parse(format!("{}: {}", path.display(), e)))?;
    let mut ids = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, rest) = line
            .split_once(',')
            .ok_or_else(|| parse_err(path, idx + 1, "expected 'id,v1,...'"))?;
        let row = parse_value_row(rest).map_err(|e| parse_err(path, idx + 1, e))?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(parse_err(
                    path,
                    idx + 1,
                    format!("expected {} values, found {}", first.len(), row.len()),
                ));
            }
        }
        ids.push(id.to_string());
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(parse_err(path, 1, "no embeddings"));
    }
    let m = Matrix::from_rows(&rows).map_err(|e| parse_err(path, 1, e))?;
    Ok((ids, m))
}

/// Reads a labels CSV (`id,label` per line, no header).
pub fn read_labels_csv(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Parse(format!("{}: {}", path.display(), e)))?;
    let mut pairs = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, label) = line
            .split_once(',')
            .ok_or_else(|| parse_err(path, idx + 1, "expected 'id,label'"))?;
        pairs.push((id.to_string(), label.to_string()));
    }
    if pairs.is_empty() {
        return Err(parse_err(path, 1, "no labels"));
    }
    Ok(pairs)
}

/// Writes via a temp file in the same directory plus rename, so readers never
/// observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp = match dir {
        Some(dir) => dir.join(format!(
            ".{}.tmp-{}",
            path.file_name().unwrap_or_default().to_string_lossy(),
            std::process::id()
        )),
        None => Path::new(&format!(".{}.tmp-{}", path.display(), std::process::id()))
            .to_path_buf(),
    };
    fs::write(&tmp, bytes).map_err(|e| CliError::Io(format!("{}: {}", tmp.display(), e)))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        CliError::Io(format!("{}: {}", path.display(), e))
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use dgmp::linalg::Matrix;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn descriptor_file_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.csv");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for case in 0..20 {
            let d = rng.random_range(1..6);
            let n = rng.random_range(1..8);
            let m = Matrix::from_fn(d, n, |_, _| {
                // mix of scales to exercise the serializer
                let base: f64 = rng.random_range(-1.0..1.0);
                let exp: i32 = rng.random_range(-12..12);
                base * 10f64.powi(exp)
            });
            let mut set = DescriptorSet::new(m).unwrap();
            if case % 2 == 0 {
                set = set.with_label(format!("class-{case}"));
            }
            write_descriptor_file(&path, &set).unwrap();
            let back = read_descriptor_file(&path).unwrap();
            assert_eq!(back.dim(), set.dim());
            assert_eq!(back.len(), set.len());
            assert_eq!(back.label, set.label);
            let (a, b) = (set.matrix().data(), back.matrix().data());
            assert_eq!(
                a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn header_mismatches_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");

        std::fs::write(&path, "dgmp-csv v1, D=2, N=2\n1,2\n").unwrap();
        let err = read_descriptor_file(&path).unwrap_err();
        assert!(format!("{err}").contains("N=2"), "{err}");

        std::fs::write(&path, "dgmp-csv v1, D=2, N=1\n1,2,3\n").unwrap();
        assert!(read_descriptor_file(&path).is_err());

        std::fs::write(&path, "dgmp-csv v2, D=2, N=1\n1,2\n").unwrap();
        assert!(read_descriptor_file(&path).is_err());

        std::fs::write(&path, "dgmp-csv v1, D=2, N=1, extra=1\n1,2\n").unwrap();
        assert!(read_descriptor_file(&path).is_err());

        std::fs::write(&path, "dgmp-csv v1, D=2, N=1\n1,nan\n").unwrap();
        assert!(read_descriptor_file(&path).is_err());
    }

    #[test]
    fn parse_errors_name_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("named.csv");
        std::fs::write(&path, "dgmp-csv v1, D=2, N=2\n1,2\n1,oops\n").unwrap();
        let err = format!("{}", read_descriptor_file(&path).unwrap_err());
        assert!(err.contains("named.csv:3"), "{err}");
    }

    #[test]
    fn label_survives_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labeled.csv");
        let set = DescriptorSet::new(Matrix::identity(2))
            .unwrap()
            .with_label("scribe-a");
        write_descriptor_file(&path, &set).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("dgmp-csv v1, D=2, N=2, label=scribe-a\n"));
        assert_eq!(read_descriptor_file(&path).unwrap().label.as_deref(), Some("scribe-a"));
    }

    #[test]
    fn embeddings_and_labels_csv_parse() {
        let dir = tempfile::tempdir().unwrap();
        let epath = dir.path().join("emb.csv");
        std::fs::write(&epath, "a,1,0\nb,0,1\n").unwrap();
        let (ids, m) = read_embeddings_csv(&epath).unwrap();
        assert_eq!(ids, vec!["a", "b"]);
        assert_eq!(m.rows(), 2);
        assert_eq!(m.cols(), 2);

        let lpath = dir.path().join("labels.csv");
        std::fs::write(&lpath, "a,x\nb,y\n").unwrap();
        let pairs = read_labels_csv(&lpath).unwrap();
        assert_eq!(pairs[0], ("a".to_string(), "x".to_string()));

        std::fs::write(&epath, "a,1,0\nb,0\n").unwrap();
        assert!(read_embeddings_csv(&epath).is_err());
    }
}
