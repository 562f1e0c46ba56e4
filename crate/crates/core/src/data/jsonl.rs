//! JSONL records plus the `vocab.json` / `stats.json` sidecars.
//!
//! One record per line:
//!
//! ```text
//! {"id": "p1", "static": [0.5, -1.0], "triplets": [[0.0, "hr", 72.0], ...],
//!  "label": 1, "forecast_mask": [0, 1, ...], "forecast_values": [0.0, 3.2, ...]}
//! ```
//!
//! `label` is optional; `forecast_mask` and `forecast_values` are optional
//! but must appear together. Floats are written in shortest round-trip form.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use super::{Dataset, ForecastTarget, NormStats, PatientRecord, Triplet};
use crate::error::{Error, Result};

pub const VOCAB_FILE: &str = "vocab.json";
pub const STATS_FILE: &str = "stats.json";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub records: usize,
    /// Records whose triplets were not in time order and had to be sorted.
    pub unsorted_records: usize,
}

/// Loads `path` together with `vocab.json` (required) and `stats.json`
/// (optional) from the same directory.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<(Dataset, LoadReport)> {
    let path = path.as_ref();
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let vocab_path = dir.join(VOCAB_FILE);
    let vocab: Vec<String> = read_json(&vocab_path)?;
    let stats_path = dir.join(STATS_FILE);
    let stats = if stats_path.exists() {
        Some(read_json::<NormStats>(&stats_path)?)
    } else {
        None
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let (mut ds, report) = read_records(BufReader::new(file), vocab, path)?;
    ds.stats = stats;
    Ok((ds, report))
}

/// Parses JSONL lines against a fixed vocabulary. `origin` only labels errors.
pub fn read_records(
    reader: impl BufRead,
    vocab: Vec<String>,
    origin: &Path,
) -> Result<(Dataset, LoadReport)> {
    let index: HashMap<&str, usize> = vocab
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let mut records = Vec::new();
    let mut report = LoadReport::default();
    let mut static_dim = None;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parser = LineParser {
            origin,
            line: lineno,
            index: &index,
        };
        let mut rec = parser.parse(&line)?;
        match static_dim {
            None => static_dim = Some(rec.statics.len()),
            Some(d) if d != rec.statics.len() => {
                return Err(parser.err(
                    "static",
                    format!("expected {d} entries, got {}", rec.statics.len()),
                ))
            }
            _ => {}
        }
        if rec.sort_triplets() {
            report.unsorted_records += 1;
        }
        records.push(rec);
    }
    report.records = records.len();
    if report.unsorted_records > 0 {
        log::warn!(
            "{}: sorted triplets of {} record(s) that were out of time order",
            origin.display(),
            report.unsorted_records
        );
    }
    let mut ds = Dataset::new(vocab, static_dim.unwrap_or(0));
    ds.records = records;
    Ok((ds, report))
}

struct LineParser<'a> {
    origin: &'a Path,
    line: usize,
    index: &'a HashMap<&'a str, usize>,
}

impl LineParser<'_> {
    fn err(&self, field: &str, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.origin.to_path_buf(),
            line: self.line,
            field: field.to_string(),
            message: message.into(),
        }
    }

    fn number(&self, v: &Value, field: &str) -> Result<f64> {
        let x = v
            .as_f64()
            .ok_or_else(|| self.err(field, "expected a number"))?;
        if !x.is_finite() {
            return Err(self.err(field, "number is not finite"));
        }
        Ok(x)
    }

    fn array<'v>(&self, v: &'v Value, field: &str) -> Result<&'v Vec<Value>> {
        v.as_array()
            .ok_or_else(|| self.err(field, "expected an array"))
    }

    fn flag(&self, v: &Value, field: &str) -> Result<bool> {
        match v.as_u64() {
            Some(0) => Ok(false),
            Some(1) => Ok(true),
            _ => Err(self.err(field, "expected 0 or 1")),
        }
    }

    fn parse(&self, line: &str) -> Result<PatientRecord> {
        let v: Value =
            serde_json::from_str(line).map_err(|e| self.err("<record>", e.to_string()))?;
        let obj = v
            .as_object()
            .ok_or_else(|| self.err("<record>", "expected a JSON object"))?;
        for key in obj.keys() {
            if !matches!(
                key.as_str(),
                "id" | "static" | "triplets" | "label" | "forecast_mask" | "forecast_values"
            ) {
                return Err(self.err(key, "unknown field"));
            }
        }
        let id = obj
            .get("id")
            .ok_or_else(|| self.err("id", "missing"))?
            .as_str()
            .ok_or_else(|| self.err("id", "expected a string"))?
            .to_string();
        let statics = self
            .array(
                obj.get("static")
                    .ok_or_else(|| self.err("static", "missing"))?,
                "static",
            )?
            .iter()
            .enumerate()
            .map(|(k, x)| self.number(x, &format!("static[{k}]")))
            .collect::<Result<Vec<_>>>()?;

        let raw = self.array(
            obj.get("triplets")
                .ok_or_else(|| self.err("triplets", "missing"))?,
            "triplets",
        )?;
        if raw.is_empty() {
            return Err(self.err("triplets", "record needs at least one triplet"));
        }
        let mut triplets = Vec::with_capacity(raw.len());
        for (k, t) in raw.iter().enumerate() {
            let field = format!("triplets[{k}]");
            let parts = self.array(t, &field)?;
            if parts.len() != 3 {
                return Err(self.err(&field, "expected [time, feature, value]"));
            }
            let time = self.number(&parts[0], &format!("{field}.time"))?;
            if time < 0.0 {
                return Err(self.err(
                    &format!("{field}.time"),
                    format!("negative time, line {}", self.line),
                ));
            }
            let name = parts[1]
                .as_str()
                .ok_or_else(|| self.err(&format!("{field}.feature"), "expected a feature name"))?;
            let feature = *self.index.get(name).ok_or_else(|| {
                self.err(
                    &format!("{field}.feature"),
                    format!("unknown feature {name:?}"),
                )
            })?;
            let value = self.number(&parts[2], &format!("{field}.value"))?;
            triplets.push(Triplet {
                time,
                feature,
                value,
            });
        }

        let label = match obj.get("label") {
            None | Some(Value::Null) => None,
            Some(l) => Some(u8::from(self.flag(l, "label")?)),
        };

        let nf = self.index.len();
        let forecast = match (obj.get("forecast_mask"), obj.get("forecast_values")) {
            (None, None) => None,
            (Some(m), Some(x)) => {
                let m = self.array(m, "forecast_mask")?;
                let x = self.array(x, "forecast_values")?;
                if m.len() != nf {
                    return Err(self.err("forecast_mask", format!("expected {nf} entries")));
                }
                if x.len() != nf {
                    return Err(self.err("forecast_values", format!("expected {nf} entries")));
                }
                let mask = m
                    .iter()
                    .enumerate()
                    .map(|(k, v)| self.flag(v, &format!("forecast_mask[{k}]")))
                    .collect::<Result<Vec<_>>>()?;
                let mut values = Vec::with_capacity(nf);
                for (k, v) in x.iter().enumerate() {
                    values.push(if mask[k] {
                        self.number(v, &format!("forecast_values[{k}]"))?
                    } else {
                        v.as_f64().filter(|x| x.is_finite()).unwrap_or(0.0)
                    });
                }
                Some(ForecastTarget { mask, values })
            }
            (Some(_), None) => {
                return Err(self.err("forecast_values", "missing while forecast_mask is present"))
            }
            (None, Some(_)) => {
                return Err(self.err("forecast_mask", "missing while forecast_values is present"))
            }
        };

        Ok(PatientRecord {
            id,
            statics,
            triplets,
            label,
            forecast,
        })
    }
}

#[derive(Serialize)]
struct RecordLine<'a> {
    id: &'a str,
    #[serde(rename = "static")]
    statics: &'a [f64],
    triplets: Vec<(f64, &'a str, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    forecast_mask: Option<Vec<u8>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    forecast_values: Option<Vec<f64>>,
}

/// Writes one JSON line per record.
pub fn write_records(ds: &Dataset, mut w: impl Write) -> Result<()> {
    for r in &ds.records {
        let line = RecordLine {
            id: &r.id,
            statics: &r.statics,
            triplets: r
                .triplets
                .iter()
                .map(|t| (t.time, ds.vocab[t.feature].as_str(), t.value))
                .collect(),
            label: r.label,
            forecast_mask: r
                .forecast
                .as_ref()
                .map(|f| f.mask.iter().map(|&m| u8::from(m)).collect()),
            forecast_values: r.forecast.as_ref().map(|f| {
                f.values
                    .iter()
                    .zip(&f.mask)
                    .map(|(&v, &m)| if m { v } else { 0.0 })
                    .collect()
            }),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")
            .map_err(|e| Error::io("<jsonl writer>", e))?;
    }
    Ok(())
}

/// Writes `data.jsonl`, `vocab.json` and, when present, `stats.json` into `dir`.
/// Returns the path of the JSONL file.
pub fn save_jsonl(ds: &Dataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let data = dir.join("data.jsonl");
    let file = File::create(&data).map_err(|e| Error::io(&data, e))?;
    let mut w = BufWriter::new(file);
    write_records(ds, &mut w)?;
    w.flush().map_err(|e| Error::io(&data, e))?;
    write_json(&dir.join(VOCAB_FILE), &ds.vocab)?;
    if let Some(stats) = &ds.stats {
        write_json(&dir.join(STATS_FILE), stats)?;
    }
    Ok(data)
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
