//! File formats: dataset CSV, JSON documents, atomic writes.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::frf::{BladeSpec, FrfRecord};

pub const DATASET_HEADER: [&str; 4] = ["frequency_hz", "real", "imag", "label"];

/// Writes through a temporary sibling and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::input(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn dataset_csv(records: &[FrfRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(DATASET_HEADER).map_err(csv_err)?;
    for r in records {
        let label = r.label.as_deref().unwrap_or("");
        for i in 0..r.len() {
            w.write_record([
                r.frequency_hz[i].to_string(),
                r.real[i].to_string(),
                r.imag[i].to_string(),
                label.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn write_dataset_csv(path: &Path, records: &[FrfRecord]) -> Result<()> {
    atomic_write(path, &dataset_csv(records)?)
}

/// Parses a dataset CSV. A new record starts whenever the label changes or
/// the frequency stops increasing. Lines starting with `#` are skipped.
pub fn parse_dataset_csv(text: &str, origin: &str) -> Result<Vec<FrfRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let parse_err = |line: u64, message: String| Error::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got != DATASET_HEADER {
        return Err(parse_err(1, format!("expected header {}", DATASET_HEADER.join(","))));
    }
    let mut records: Vec<FrfRecord> = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let num = |i: usize, name: &str| -> Result<f64> {
            let s = row.get(i).map(str::trim).unwrap_or("");
            let v: f64 = s
                .parse()
                .map_err(|_| parse_err(line, format!("bad {name} value '{s}'")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite {name}")));
            }
            Ok(v)
        };
        let f = num(0, "frequency_hz")?;
        let re = num(1, "real")?;
        let im = num(2, "imag")?;
        let label = row.get(3).map(str::trim).filter(|s| !s.is_empty()).map(String::from);
        let start_new = match records.last() {
            None => true,
            Some(r) => r.label != label || r.frequency_hz.last().is_some_and(|&last| f <= last),
        };
        if start_new {
            records.push(FrfRecord {
                frequency_hz: Vec::new(),
                real: Vec::new(),
                imag: Vec::new(),
                label,
            });
        }
        let r = records.last_mut().expect("record present");
        r.frequency_hz.push(f);
        r.real.push(re);
        r.imag.push(im);
    }
    if records.is_empty() {
        return Err(parse_err(1, "no data rows".into()));
    }
    for (i, r) in records.iter().enumerate() {
        r.validate()
            .map_err(|e| parse_err(0, format!("record {i}: {e}")))?;
    }
    Ok(records)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::File {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_dataset_csv(path: &Path) -> Result<Vec<FrfRecord>> {
    let text = read_text(path)?;
    parse_dataset_csv(&text, &path.display().to_string())
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    atomic_write(path, &to_json_bytes(value)?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line() as u64,
        message: e.to_string(),
    })
}

/// Specs file: either a single spec object or an array of them.
pub fn read_specs(path: &Path) -> Result<Vec<BladeSpec>> {
    #[derive(serde::Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        Many(Vec<BladeSpec>),
        One(BladeSpec),
    }
    let specs = match read_json::<OneOrMany>(path)? {
        OneOrMany::Many(v) => v,
        OneOrMany::One(s) => vec![s],
    };
    if specs.is_empty() {
        return Err(Error::input(format!("{}: no specs", path.display())));
    }
    for s in &specs {
        s.validate()?;
    }
    Ok(specs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frf::{default_population, synthesize_population, Band};

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = synthesize_population(&default_population(), Band::new(48.0, 56.0).unwrap(), 17).unwrap();
        let bytes = dataset_csv(&ds.records).unwrap();
        let back = parse_dataset_csv(std::str::from_utf8(&bytes).unwrap(), "mem").unwrap();
        assert_eq!(back, ds.records);
    }

    #[test]
    fn comment_lines_are_skipped() {
        let text = "# run abc\nfrequency_hz,real,imag,label\n1,0.5,0.25,a\n# note\n2,0.5,0.25,a\n";
        let recs = parse_dataset_csv(text, "mem").unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].frequency_hz, vec![1.0, 2.0]);
    }

    #[test]
    fn unlabelled_records_split_on_frequency_reset() {
        let text = "frequency_hz,real,imag,label\n1,0,1,\n2,0,1,\n1,0,2,\n2,0,2,\n";
        let r = parse_dataset_csv(text, "mem").unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[1].imag, vec![2.0, 2.0]);
        assert_eq!(r[0].label, None);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "frequency_hz,real,imag,label\n1,0,1,a\n2,zz,1,a\n";
        match parse_dataset_csv(text, "mem") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(parse_dataset_csv("a,b\n1,2\n", "mem").is_err());
        // truncated: a single-sample record
        assert!(parse_dataset_csv("frequency_hz,real,imag,label\n1,0,1,a\n", "mem").is_err());
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.txt");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
