//! Configuration parsing and on-disk run artifacts.
//!
//! A run directory holds `timeseries.csv`, `events.csv`, `summary.json` and
//! `manifest.json`. Floats are written with 17 significant digits so that they
//! parse back to the same bits. Every file is written to a temporary sibling
//! and renamed into place.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::ModelConfig;
use crate::engine::{EventKind, FundRecord, Provenance, RunArtifact, StepRecord};
use crate::error::{Error, Result};
use crate::model::performance_update;
use crate::stats::{self, RunSummary};

pub const TIMESERIES_FILE: &str = "timeseries.csv";
pub const EVENTS_FILE: &str = "events.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MANIFEST_FILE: &str = "manifest.json";

const FUND_COLUMNS: [&str; 6] = [
    "wealth",
    "shares",
    "cash",
    "leverage",
    "margin_call",
    "flow",
];
const BASE_COLUMNS: [&str; 6] = ["t", "price", "log_return", "xi", "m", "agg_leverage"];

/// Shortest text guaranteed to round-trip: 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Absent values become `null`.
pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "null".to_string(), fmt_f64)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut builder = tempfile::Builder::new();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        builder.permissions(std::fs::Permissions::from_mode(0o644));
    }
    let mut tmp = builder.tempfile_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Splits `key=value`.
pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::InvalidInput(format!(
            "expected key=value, got {s:?}"
        ))),
    }
}

/// Parses the value as JSON, falling back to a bare string.
fn override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

enum Index {
    One(usize),
    All,
}

fn split_segment(seg: &str) -> Result<(&str, Option<Index>)> {
    let Some(open) = seg.find('[') else {
        return Ok((seg, None));
    };
    let name = &seg[..open];
    let inner = seg[open + 1..]
        .strip_suffix(']')
        .ok_or_else(|| Error::config(seg, "unterminated index"))?;
    let idx = if inner == "*" {
        Index::All
    } else {
        Index::One(
            inner
                .parse()
                .map_err(|_| Error::config(seg, "index must be an integer or *"))?,
        )
    };
    Ok((name, Some(idx)))
}

fn apply_path(target: &mut Value, segments: &[&str], full_key: &str, new: &Value) -> Result<()> {
    let Some((first, rest)) = segments.split_first() else {
        *target = new.clone();
        return Ok(());
    };
    let (name, index) = split_segment(first)?;
    let obj = target
        .as_object_mut()
        .ok_or_else(|| Error::config(full_key, format!("{name:?} is not inside an object")))?;
    let slot = obj.entry(name.to_string()).or_insert(Value::Null);
    match index {
        None => {
            if rest.is_empty() {
                *slot = new.clone();
                Ok(())
            } else {
                if slot.is_null() {
                    *slot = Value::Object(Default::default());
                }
                apply_path(slot, rest, full_key, new)
            }
        }
        Some(index) => {
            let arr = slot
                .as_array_mut()
                .ok_or_else(|| Error::config(full_key, format!("{name:?} is not a list")))?;
            let targets: Vec<&mut Value> = match index {
                Index::All => arr.iter_mut().collect(),
                Index::One(i) => {
                    let len = arr.len();
                    vec![arr.get_mut(i).ok_or_else(|| {
                        Error::config(full_key, format!("index {i} out of range (len {len})"))
                    })?]
                }
            };
            for t in targets {
                apply_path(t, rest, full_key, new)?;
            }
            Ok(())
        }
    }
}

/// Sets a dotted key such as `sigma`, `policy.kappa`, `funds[0].lambda_max`
/// or `funds[*].beta`. The value is parsed as JSON where possible.
pub fn apply_override(target: &mut Value, key: &str, raw: &str) -> Result<()> {
    let segments: Vec<&str> = key.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::config(key, "empty path segment"));
    }
    apply_path(target, &segments, key, &override_value(raw))
}

/// Builds a validated configuration from a JSON object laid over the
/// defaults, then the overrides in order. A run manifest is accepted in place
/// of a bare configuration.
pub fn config_from_value(file: Value, overrides: &[(String, String)]) -> Result<ModelConfig> {
    let file = match file {
        Value::Object(mut obj) if obj.contains_key("config") && obj.contains_key("provenance") => {
            obj.remove("config").unwrap_or(Value::Null)
        }
        other => other,
    };
    let Value::Object(file_obj) = file else {
        return Err(Error::config(
            "<root>",
            "configuration must be a JSON object",
        ));
    };
    let mut merged = serde_json::to_value(ModelConfig::default())?;
    let merged_obj = merged
        .as_object_mut()
        .expect("config serializes to an object");
    for (k, v) in file_obj {
        merged_obj.insert(k, v);
    }
    for (k, v) in overrides {
        apply_override(&mut merged, k, v)?;
    }
    let cfg: ModelConfig =
        serde_json::from_value(merged).map_err(|e| Error::config("<config>", e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a configuration file, or starts from the defaults when none is given.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<ModelConfig> {
    let value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: p.to_path_buf(),
                message: e.to_string(),
            })?
        }
        None => Value::Object(Default::default()),
    };
    config_from_value(value, overrides)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ModelConfig,
    pub provenance: Provenance,
}

pub fn timeseries_header(n_funds: usize) -> String {
    let mut cols: Vec<String> = BASE_COLUMNS.iter().map(|s| s.to_string()).collect();
    for h in 0..n_funds {
        cols.extend(FUND_COLUMNS.iter().map(|c| format!("{c}_{h}")));
    }
    cols.join(",")
}

pub fn timeseries_csv(records: &[StepRecord], n_funds: usize) -> String {
    let mut out = String::with_capacity(64 + records.len() * (100 + n_funds * 140));
    out.push_str(&timeseries_header(n_funds));
    out.push('\n');
    for r in records {
        let _ = write!(
            out,
            "{},{},{},{},{},{}",
            r.t,
            fmt_f64(r.price),
            fmt_f64(r.log_return),
            fmt_f64(r.xi),
            fmt_f64(r.mispricing),
            fmt_f64(r.aggregate_leverage)
        );
        for f in &r.funds {
            let _ = write!(
                out,
                ",{},{},{},{},{},{}",
                fmt_f64(f.wealth),
                fmt_f64(f.shares),
                fmt_f64(f.cash),
                fmt_f64(f.leverage),
                u8::from(f.margin_call),
                fmt_f64(f.flow)
            );
        }
        out.push('\n');
    }
    out
}

pub fn events_csv(artifact: &RunArtifact) -> String {
    let mut out = String::from("t,fund,event\n");
    for e in &artifact.events {
        let _ = writeln!(out, "{},{},{}", e.t, e.fund, e.kind.as_str());
    }
    out
}

/// Writes a run directory. With `compact`, only the summary and manifest.
pub fn emit_run(artifact: &RunArtifact, dir: &Path, compact: bool) -> Result<()> {
    create_dir(dir)?;
    if !compact {
        let n_funds = artifact.config.funds.len();
        write_atomic(
            &dir.join(TIMESERIES_FILE),
            timeseries_csv(&artifact.records, n_funds).as_bytes(),
        )?;
        write_atomic(&dir.join(EVENTS_FILE), events_csv(artifact).as_bytes())?;
    }
    write_json(&dir.join(SUMMARY_FILE), &artifact.summary)?;
    write_json(
        &dir.join(MANIFEST_FILE),
        &RunManifest {
            config: artifact.config.clone(),
            provenance: artifact.provenance.clone(),
        },
    )
}

pub fn read_manifest_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    read_manifest_json(path)
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message: format!("line {line}: {}", message.into()),
    }
}

/// Default events keyed by `(t, fund)`.
fn read_defaults(path: &Path) -> Result<HashSet<(u64, usize)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("t,fund,event") {
        return Err(parse_err(path, 1, "expected header t,fund,event"));
    }
    let mut out = HashSet::new();
    for (i, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(parse_err(path, i + 2, "expected 3 columns"));
        }
        let t = cols[0]
            .parse()
            .map_err(|_| parse_err(path, i + 2, "bad t"))?;
        let fund = cols[1]
            .parse()
            .map_err(|_| parse_err(path, i + 2, "bad fund"))?;
        if cols[2] == EventKind::Default.as_str() {
            out.insert((t, fund));
        }
    }
    Ok(out)
}

/// Rebuilds step records from a run directory. Returns and performance
/// averages are recomputed from holdings; the solver residual and noise draw
/// are not stored and come back as NaN.
pub fn read_run(dir: &Path) -> Result<(ModelConfig, Vec<StepRecord>)> {
    let manifest = read_manifest(&dir.join(MANIFEST_FILE))?;
    let cfg = manifest.config;
    let n_funds = cfg.funds.len();
    let defaults = read_defaults(&dir.join(EVENTS_FILE))?;
    let path = dir.join(TIMESERIES_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != timeseries_header(n_funds) {
        return Err(parse_err(
            &path,
            1,
            format!("header does not match {n_funds} funds"),
        ));
    }
    let width = BASE_COLUMNS.len() + FUND_COLUMNS.len() * n_funds;

    let mut prev_price = cfg.fundamental_value;
    let mut prev: Vec<(f64, f64, f64)> = vec![(cfg.initial_wealth, 0.0, 0.0); n_funds];
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != width {
            return Err(parse_err(
                &path,
                lineno,
                format!("expected {width} columns, found {}", cols.len()),
            ));
        }
        let num = |j: usize| -> Result<f64> {
            cols[j]
                .parse::<f64>()
                .map_err(|_| parse_err(&path, lineno, format!("column {} not a number", j + 1)))
        };
        let t: u64 = cols[0]
            .parse()
            .map_err(|_| parse_err(&path, lineno, "bad t"))?;
        let price = num(1)?;
        let mut funds = Vec::with_capacity(n_funds);
        for h in 0..n_funds {
            let base = BASE_COLUMNS.len() + h * FUND_COLUMNS.len();
            let (w_prev, d_prev, rp_prev) = prev[h];
            let defaulted = defaults.contains(&(t, h));
            let wealth = num(base)?;
            let shares = num(base + 1)?;
            let ret = if w_prev > 0.0 {
                d_prev * (price - prev_price) / w_prev
            } else {
                0.0
            };
            let r_perf = if defaulted || wealth <= 0.0 {
                0.0
            } else {
                performance_update(rp_prev, ret, cfg.a)
            };
            funds.push(FundRecord {
                wealth,
                shares,
                cash: num(base + 2)?,
                leverage: num(base + 3)?,
                margin_call: match cols[base + 4] {
                    "0" => false,
                    "1" => true,
                    _ => return Err(parse_err(&path, lineno, "margin_call must be 0 or 1")),
                },
                defaulted,
                flow: num(base + 5)?,
                ret,
                r_perf,
                cap: f64::NAN,
            });
            prev[h] = (wealth, shares, r_perf);
        }
        records.push(StepRecord {
            t,
            price,
            log_return: num(2)?,
            xi: num(3)?,
            chi: f64::NAN,
            mispricing: num(4)?,
            aggregate_leverage: num(5)?,
            residual: f64::NAN,
            funds,
        });
        prev_price = price;
    }
    Ok((cfg, records))
}

/// Recomputes the summary of a run directory and rewrites `summary.json`.
pub fn analyze(dir: &Path) -> Result<RunSummary> {
    let (cfg, records) = read_run(dir)?;
    let summary = stats::summary(&cfg, &records);
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// A table of pre-formatted cells.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}
