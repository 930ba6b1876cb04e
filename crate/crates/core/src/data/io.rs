//! CSV and JSONL record files.
//!
//! CSV columns: `id,video_id,track_id,split,label,a_0..,p_0..,s_0..`.
//! JSONL keys: `id, video_id, track_id, split, label, x_a, x_p, x_s`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use super::{FeatureRecord, StreamConfig};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    Csv,
    Jsonl,
}

impl DataFormat {
    /// Infers the format from the file extension, defaulting to CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => DataFormat::Jsonl,
            _ => DataFormat::Csv,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            DataFormat::Csv => "csv",
            DataFormat::Jsonl => "jsonl",
        }
    }
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(DataFormat::Csv),
            "jsonl" => Ok(DataFormat::Jsonl),
            _ => Err(Error::Config(format!("unknown data format `{s}` (csv | jsonl)"))),
        }
    }
}

fn header(cfg: &StreamConfig) -> Vec<String> {
    let mut cols: Vec<String> = ["id", "video_id", "track_id", "split", "label"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for (prefix, n) in [("a", cfg.d_a), ("p", cfg.d_p), ("s", cfg.width_s())] {
        cols.extend((0..n).map(|j| format!("{prefix}_{j}")));
    }
    cols
}

pub fn load_records(path: &Path, format: DataFormat, cfg: &StreamConfig) -> Result<Vec<FeatureRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    match format {
        DataFormat::Csv => read_csv(file, &path.display().to_string(), cfg),
        DataFormat::Jsonl => read_jsonl(BufReader::new(file), &path.display().to_string(), cfg),
    }
}

fn parse_err(path: &str, line: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        detail: detail.into(),
    }
}

fn read_csv(reader: impl std::io::Read, path: &str, cfg: &StreamConfig) -> Result<Vec<FeatureRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let csv_err = |e: csv::Error| {
        let line = e.position().map_or(0, |p| p.line() as usize);
        parse_err(path, line, e.to_string())
    };
    let found = rdr.headers().map_err(csv_err)?.clone();
    if found.is_empty() {
        return Ok(Vec::new());
    }
    let expected = header(cfg);
    for (j, name) in expected.iter().enumerate() {
        match found.get(j) {
            Some(h) if h.trim() == name => {}
            Some(h) => return Err(parse_err(path, 1, format!("column {}: expected `{name}`, found `{h}`", j + 1))),
            None => return Err(parse_err(path, 1, format!("missing column `{name}`"))),
        }
    }
    if found.len() > expected.len() {
        return Err(parse_err(
            path,
            1,
            format!("unexpected extra column `{}`", &found[expected.len()]),
        ));
    }

    let (na, np) = (cfg.d_a, cfg.d_p);
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(csv_err)?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let num = |j: usize| -> Result<f64> {
            let cell = row[j].trim();
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(path, line, format!("column `{}`: `{cell}` is not a finite number", expected[j])))
        };
        let label = match row[4].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(parse_err(path, line, format!("label `{other}` not in {{0,1}}"))),
        };
        let split = row[3]
            .parse()
            .map_err(|e: Error| parse_err(path, line, e.to_string()))?;
        let values = (5..expected.len()).map(num).collect::<Result<Vec<f64>>>()?;
        out.push(FeatureRecord {
            id: row[0].to_string(),
            video_id: row[1].to_string(),
            track_id: row[2].to_string(),
            split,
            label,
            x_a: values[..na].to_vec(),
            x_p: values[na..na + np].to_vec(),
            x_s: values[na + np..].to_vec(),
        });
    }
    Ok(out)
}

fn read_jsonl(reader: impl BufRead, path: &str, cfg: &StreamConfig) -> Result<Vec<FeatureRecord>> {
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line_no = k + 1;
        let line = line.map_err(|e| parse_err(path, line_no, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FeatureRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(path, line_no, e.to_string()))?;
        rec.validate(cfg)
            .map_err(|e| parse_err(path, line_no, e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

/// Writes records in the documented layout. Floats use the shortest
/// representation that parses back to the same value.
pub fn write_records(path: &Path, records: &[FeatureRecord], format: DataFormat, cfg: &StreamConfig) -> Result<()> {
    for r in records {
        r.validate(cfg)?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path, e);
    match format {
        DataFormat::Csv => {
            let mut wr = csv::Writer::from_writer(&mut w);
            let csv_io = |e: csv::Error| Error::io(path, e.into());
            wr.write_record(header(cfg)).map_err(csv_io)?;
            for r in records {
                let mut row = vec![
                    r.id.clone(),
                    r.video_id.clone(),
                    r.track_id.clone(),
                    r.split.to_string(),
                    r.label.to_string(),
                ];
                row.extend(r.x_a.iter().chain(&r.x_p).chain(&r.x_s).map(|v| v.to_string()));
                wr.write_record(&row).map_err(csv_io)?;
            }
            wr.flush().map_err(io)?;
        }
        DataFormat::Jsonl => {
            for r in records {
                serde_json::to_writer(&mut w, r)?;
                w.write_all(b"\n").map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Split, SyntheticSpec};

    fn small() -> (StreamConfig, Vec<FeatureRecord>) {
        let cfg = StreamConfig::default();
        let spec = SyntheticSpec {
            n_train: 40,
            n_val: 10,
            n_test: 10,
            ..Default::default()
        };
        let recs = generate_synthetic(&spec, &cfg).unwrap().records;
        (cfg, recs)
    }

    #[test]
    fn round_trip_is_lossless() {
        let (cfg, recs) = small();
        let dir = tempfile::tempdir().unwrap();
        for fmt in [DataFormat::Csv, DataFormat::Jsonl] {
            let path = dir.path().join(format!("d.{}", fmt.extension()));
            write_records(&path, &recs, fmt, &cfg).unwrap();
            let back = load_records(&path, fmt, &cfg).unwrap();
            assert_eq!(back.len(), recs.len());
            for (a, b) in recs.iter().zip(&back) {
                assert_eq!((&a.id, a.split, a.label), (&b.id, b.split, b.label));
                for (x, y) in a.x_a.iter().chain(&a.x_p).chain(&a.x_s).zip(b.x_a.iter().chain(&b.x_p).chain(&b.x_s)) {
                    assert!((x - y).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn header_only_is_empty() {
        let cfg = StreamConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        write_records(&path, &[], DataFormat::Csv, &cfg).unwrap();
        assert!(load_records(&path, DataFormat::Csv, &cfg).unwrap().is_empty());
    }

    #[test]
    fn bad_label_reports_line() {
        let (cfg, recs) = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_records(&path, &recs[..5], DataFormat::Csv, &cfg).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[3] = lines[3].replacen(",train,0,", ",train,2,", 1).replacen(",train,1,", ",train,2,", 1);
        std::fs::write(&path, lines.join("\n")).unwrap();
        match load_records(&path, DataFormat::Csv, &cfg) {
            Err(Error::Parse { line, detail, .. }) => {
                assert_eq!(line, 4);
                assert!(detail.contains("label"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_and_unknown_split() {
        let (cfg, recs) = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_records(&path, &recs[..3], DataFormat::Csv, &cfg).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut cells: Vec<String> = lines[2].split(',').map(String::from).collect();
        cells[7] = "abc".into();
        lines[2] = cells.join(",");
        std::fs::write(&path, lines.join("\n")).unwrap();
        assert!(matches!(load_records(&path, DataFormat::Csv, &cfg), Err(Error::Parse { line: 3, .. })));

        let mut cells: Vec<String> = text.lines().nth(1).unwrap().split(',').map(String::from).collect();
        cells[3] = "dev".into();
        std::fs::write(&path, format!("{}\n{}", text.lines().next().unwrap(), cells.join(","))).unwrap();
        assert!(matches!(load_records(&path, DataFormat::Csv, &cfg), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn missing_column_is_parse_error() {
        let cfg = StreamConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "id,video_id,track_id,split\n").unwrap();
        assert!(matches!(load_records(&path, DataFormat::Csv, &cfg), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn jsonl_label_two_rejected() {
        let (cfg, recs) = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let mut bad = recs[1].clone();
        bad.label = 2;
        let body = [&recs[0], &bad]
            .iter()
            .map(|r| serde_json::to_string(r).unwrap())
            .collect::<Vec<_>>()
            .join("\n");
        std::fs::write(&path, body).unwrap();
        assert!(matches!(load_records(&path, DataFormat::Jsonl, &cfg), Err(Error::Parse { line: 2, .. })));
        assert_eq!(recs[0].split, Split::Train);
    }
}
