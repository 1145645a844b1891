use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::cycle::{Cycle, PAD_LABEL};
use crate::error::{Error, Result};
use crate::substrate::Tensor;

/// Sampling rate assumed for ingested CSV cycles.
pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 100.0;

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads a cycle CSV with header `t,s1,...,sS,label`.
///
/// `t` must start at 0 and increase strictly; sensors must be finite
/// numbers and labels integers.
pub fn load_cycle(path: &Path) -> Result<Cycle> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let header = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 3 || cols[0] != "t" || cols[cols.len() - 1] != "label" {
        return Err(parse_err(path, 1, format!("header must be t,s1,...,sS,label, got {}", cols.join(","))));
    }
    let sensors = cols.len() - 2;
    for (i, name) in cols[1..=sensors].iter().enumerate() {
        if *name != format!("s{}", i + 1) {
            return Err(parse_err(path, 1, format!("expected column s{}, found {name:?}", i + 1)));
        }
    }

    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); sensors];
    let mut labels = Vec::new();
    let mut last_t: Option<i64> = None;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != sensors + 2 {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", sensors + 2, record.len()),
            ));
        }
        let t: i64 = record[0]
            .parse()
            .map_err(|_| parse_err(path, line, format!("time index {:?} is not an integer", &record[0])))?;
        match last_t {
            None if t != 0 => return Err(parse_err(path, line, format!("time index must start at 0, got {t}"))),
            Some(prev) if t <= prev => {
                return Err(parse_err(path, line, format!("time index {t} does not increase (previous {prev})")))
            }
            _ => {}
        }
        last_t = Some(t);
        for (s, col) in columns.iter_mut().enumerate() {
            let raw = &record[s + 1];
            let v: f64 = raw
                .parse()
                .map_err(|_| parse_err(path, line, format!("sensor s{} value {raw:?} is not numeric", s + 1)))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, format!("sensor s{} value {raw:?} is not finite", s + 1)));
            }
            col.push(v);
        }
        let raw = &record[sensors + 1];
        let label: i64 = raw
            .parse()
            .map_err(|_| parse_err(path, line, format!("label {raw:?} is not an integer")))?;
        if label == PAD_LABEL {
            return Err(parse_err(path, line, format!("label {PAD_LABEL} is reserved for padding")));
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(parse_err(path, 2, "cycle has no rows"));
    }
    let t = labels.len();
    let sensors = Tensor::new(&[sensors, t], columns.concat())?;
    let id = path
        .file_stem()
        .map_or_else(|| "cycle".to_string(), |s| s.to_string_lossy().into_owned());
    Cycle::new(id, sensors, labels, DEFAULT_SAMPLE_RATE_HZ)
}

/// Writes the recorded (unpadded) timesteps of a cycle as CSV. Sensor values
/// use 17 significant digits so that reading the file back is exact.
pub fn write_cycle(cycle: &Cycle, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let s = cycle.num_sensors();
    let io = |e| Error::io(path, e);
    let mut header = String::from("t");
    for i in 1..=s {
        header.push_str(&format!(",s{i}"));
    }
    writeln!(w, "{header},label").map_err(io)?;
    let mut t_out = 0usize;
    for t in (0..cycle.len()).filter(|&t| cycle.mask[t]) {
        let mut row = t_out.to_string();
        for sensor in 0..s {
            row.push_str(&format!(",{:.16e}", cycle.sensors.get(&[sensor, t])));
        }
        writeln!(w, "{row},{}", cycle.labels[t]).map_err(io)?;
        t_out += 1;
    }
    w.flush().map_err(io)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Data(format!("unknown split {other:?} (expected train, val or test)"))),
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Resolved against the manifest's directory when relative.
    pub path: PathBuf,
    pub split: SplitName,
}

/// Reads a manifest CSV `path,split`.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header = reader.headers().map_err(|e| parse_err(path, 1, e.to_string()))?;
    if header.iter().collect::<Vec<_>>() != ["path", "split"] {
        return Err(parse_err(path, 1, "manifest header must be path,split"));
    }
    let mut entries = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| parse_err(path, e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let split = record[1]
            .parse()
            .map_err(|e: Error| parse_err(path, line, e.to_string()))?;
        let p = Path::new(&record[0]);
        entries.push(ManifestEntry {
            path: if p.is_absolute() { p.to_path_buf() } else { base.join(p) },
            split,
        });
    }
    Ok(entries)
}

/// Writes a manifest with paths stored exactly as given.
pub fn write_manifest(entries: &[(String, SplitName)], path: &Path) -> Result<()> {
    let mut text = String::from("path,split\n");
    for (p, split) in entries {
        text.push_str(&format!("{p},{split}\n"));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
