//! Report types and their CSV / JSON encodings.
//!
//! CSV reports carry their configuration as leading `# key = value` comment
//! lines, then one header row, then data rows. Run totals and the
//! termination status follow as trailing comment lines. JSON reports are a
//! single object. Both forms parse back to the same values.

use std::fmt;
use std::fs::File;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(Error::Config(format!("unknown format `{s}` (expected csv or json)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub step: u64,
    pub loss: f64,
    pub elements_generated: u64,
    pub state_floats: u64,
}

pub const RUN_COLUMNS: [&str; 4] = ["step", "loss", "elements_generated", "state_floats"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunStatus {
    Completed,
    ReachedTarget { step: u64 },
    Diverged { step: u64 },
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunStatus::Completed => f.write_str("completed"),
            RunStatus::ReachedTarget { step } => write!(f, "reached_target@{step}"),
            RunStatus::Diverged { step } => write!(f, "diverged@{step}"),
        }
    }
}

impl std::str::FromStr for RunStatus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "completed" {
            return Ok(RunStatus::Completed);
        }
        let (kind, step) = s.split_once('@').ok_or_else(|| Error::Parse(format!("bad status `{s}`")))?;
        let step = step.parse().map_err(|_| Error::Parse(format!("bad status step in `{s}`")))?;
        match kind {
            "reached_target" => Ok(RunStatus::ReachedTarget { step }),
            "diverged" => Ok(RunStatus::Diverged { step }),
            _ => Err(Error::Parse(format!("bad status `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTotals {
    pub steps_run: u64,
    pub elements_generated: u64,
    pub state_floats: u64,
    pub skipped_steps: u64,
    /// Wall time in milliseconds. Not emitted unless requested, so that
    /// repeated runs produce identical files.
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub config: Vec<(String, String)>,
    pub seed: u64,
    pub rows: Vec<ReportRow>,
    pub totals: RunTotals,
    pub status: RunStatus,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EmitOptions {
    pub timing: bool,
}

fn fmt_f64(x: f64) -> String {
    // `Display` for f64 prints the shortest string that parses back exactly.
    format!("{x}")
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::Parse(format!("bad number `{s}`")))
}

fn parse_u64(s: &str) -> Result<u64> {
    s.trim().parse().map_err(|_| Error::Parse(format!("bad integer `{s}`")))
}

fn comment_pair(line: &str) -> Option<(String, String)> {
    let body = line.strip_prefix('#')?.trim();
    let (k, v) = body.split_once(" = ")?;
    Some((k.trim().to_string(), v.trim().to_string()))
}

impl RunReport {
    /// Looks up a config echo value.
    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn final_loss(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.loss)
    }

    pub fn to_csv(&self, opts: EmitOptions) -> Result<String> {
        let mut out = String::new();
        for (k, v) in &self.config {
            out.push_str(&format!("# {k} = {v}\n"));
        }
        if self.config_value("seed").is_none() {
            out.push_str(&format!("# seed = {}\n", self.seed));
        }
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(RUN_COLUMNS)?;
        for r in &self.rows {
            w.write_record([r.step.to_string(), fmt_f64(r.loss), r.elements_generated.to_string(), r.state_floats.to_string()])?;
        }
        let body = w.into_inner().map_err(|e| Error::Io(io::Error::other(e.to_string())))?;
        out.push_str(std::str::from_utf8(&body).expect("csv output is utf-8"));
        let t = &self.totals;
        out.push_str(&format!("# steps_run = {}\n", t.steps_run));
        out.push_str(&format!("# total_elements_generated = {}\n", t.elements_generated));
        out.push_str(&format!("# total_state_floats = {}\n", t.state_floats));
        out.push_str(&format!("# skipped_steps = {}\n", t.skipped_steps));
        if opts.timing {
            out.push_str(&format!("# wall_ms = {}\n", fmt_f64(t.wall_ms)));
        }
        out.push_str(&format!("# status = {}\n", self.status));
        Ok(out)
    }

    pub fn from_csv(text: &str) -> Result<RunReport> {
        let mut config = Vec::new();
        let mut trailer = Vec::new();
        let mut seen_header = false;
        for line in text.lines() {
            if line.starts_with('#') {
                let pair = comment_pair(line).ok_or_else(|| Error::Parse(format!("bad comment line `{line}`")))?;
                if seen_header {
                    trailer.push(pair);
                } else {
                    config.push(pair);
                }
            } else if !line.trim().is_empty() {
                seen_header = true;
            }
        }
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let header = rdr.headers()?.clone();
        if header.iter().ne(RUN_COLUMNS) {
            return Err(Error::Parse(format!("unexpected header `{}`", header.iter().collect::<Vec<_>>().join(","))));
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            rows.push(ReportRow {
                step: parse_u64(&rec[0])?,
                loss: parse_f64(&rec[1])?,
                elements_generated: parse_u64(&rec[2])?,
                state_floats: parse_u64(&rec[3])?,
            });
        }
        let get = |k: &str| {
            trailer
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| Error::Parse(format!("missing trailer `{k}`")))
        };
        let seed = config
            .iter()
            .find(|(k, _)| k == "seed")
            .map(|(_, v)| parse_u64(v))
            .transpose()?
            .ok_or_else(|| Error::Parse("missing seed".into()))?;
        let totals = RunTotals {
            steps_run: parse_u64(&get("steps_run")?)?,
            elements_generated: parse_u64(&get("total_elements_generated")?)?,
            state_floats: parse_u64(&get("total_state_floats")?)?,
            skipped_steps: parse_u64(&get("skipped_steps")?)?,
            wall_ms: get("wall_ms").map_or(Ok(0.0), |v| parse_f64(&v))?,
        };
        let status = get("status")?.parse()?;
        Ok(RunReport { config, seed, rows, totals, status })
    }

    pub fn to_json(&self, opts: EmitOptions) -> Value {
        let config: Map<String, Value> = self.config.iter().map(|(k, v)| (k.clone(), Value::String(v.clone()))).collect();
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|r| json!({"step": r.step, "loss": r.loss, "elements_generated": r.elements_generated, "state_floats": r.state_floats}))
            .collect();
        let t = &self.totals;
        let mut totals = json!({
            "steps_run": t.steps_run,
            "elements_generated": t.elements_generated,
            "state_floats": t.state_floats,
            "skipped_steps": t.skipped_steps,
        });
        if opts.timing {
            totals["wall_ms"] = json!(t.wall_ms);
        }
        json!({"config": config, "seed": self.seed, "rows": rows, "totals": totals, "status": self.status.to_string()})
    }

    pub fn from_json(v: &Value) -> Result<RunReport> {
        let bad = |what: &str| Error::Parse(format!("missing or invalid `{what}`"));
        let config = v["config"]
            .as_object()
            .ok_or_else(|| bad("config"))?
            .iter()
            .map(|(k, v)| v.as_str().map(|s| (k.clone(), s.to_string())).ok_or_else(|| bad(k)))
            .collect::<Result<Vec<_>>>()?;
        let u = |x: &Value, k: &str| x[k].as_u64().ok_or_else(|| bad(k));
        let rows = v["rows"]
            .as_array()
            .ok_or_else(|| bad("rows"))?
            .iter()
            .map(|r| {
                Ok(ReportRow {
                    step: u(r, "step")?,
                    // JSON has no NaN; a diverged loss is written as null.
                    loss: r["loss"].as_f64().unwrap_or(f64::NAN),
                    elements_generated: u(r, "elements_generated")?,
                    state_floats: u(r, "state_floats")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let t = &v["totals"];
        let totals = RunTotals {
            steps_run: u(t, "steps_run")?,
            elements_generated: u(t, "elements_generated")?,
            state_floats: u(t, "state_floats")?,
            skipped_steps: u(t, "skipped_steps")?,
            wall_ms: t["wall_ms"].as_f64().unwrap_or(0.0),
        };
        let status = v["status"].as_str().ok_or_else(|| bad("status"))?.parse()?;
        Ok(RunReport { config, seed: u(v, "seed")?, rows, totals, status })
    }

    pub fn render(&self, format: Format, opts: EmitOptions) -> Result<String> {
        match format {
            Format::Csv => self.to_csv(opts),
            Format::Json => Ok(format!("{}\n", serde_json::to_string_pretty(&self.to_json(opts))?)),
        }
    }
}

/// A generic result table: metadata, named columns and rows of JSON scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub meta: Vec<(String, String)>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

fn cell_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

impl Table {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Self { meta: Vec::new(), columns: columns.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn meta(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.meta.push((key.into(), value.to_string()));
        self
    }

    pub fn push(&mut self, row: Vec<Value>) {
        assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut out = String::new();
        for (k, v) in &self.meta {
            out.push_str(&format!("# {k} = {v}\n"));
        }
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for r in &self.rows {
            w.write_record(r.iter().map(cell_text))?;
        }
        let body = w.into_inner().map_err(|e| Error::Io(io::Error::other(e.to_string())))?;
        out.push_str(std::str::from_utf8(&body).expect("csv output is utf-8"));
        Ok(out)
    }

    pub fn to_json(&self) -> Value {
        let meta: Map<String, Value> = self.meta.iter().map(|(k, v)| (k.clone(), Value::String(v.clone()))).collect();
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|r| Value::Object(self.columns.iter().cloned().zip(r.iter().cloned()).collect()))
            .collect();
        json!({"meta": meta, "rows": rows})
    }

    pub fn render(&self, format: Format) -> Result<String> {
        match format {
            Format::Csv => self.to_csv(),
            Format::Json => Ok(format!("{}\n", serde_json::to_string_pretty(&self.to_json())?)),
        }
    }
}

/// Writes `text` to `path`, or to stdout when `path` is `None`.
pub fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            let mut f = File::create(p)?;
            f.write_all(text.as_bytes())?;
            f.flush()?;
        }
        None => {
            let mut out = io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
        }
    }
    Ok(())
}

/// Renders and writes a run report.
pub fn emit_report(report: &RunReport, format: Format, path: Option<&Path>, opts: EmitOptions) -> Result<()> {
    write_output(path, &report.render(format, opts)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RunReport {
        RunReport {
            config: vec![("optimizer".into(), "tezo".into()), ("objective".into(), "mlp:4,\"3\",2".into()), ("seed".into(), "9".into())],
            seed: 9,
            rows: vec![
                ReportRow { step: 0, loss: 1.0 / 3.0, elements_generated: 40, state_floats: 0 },
                ReportRow { step: 10, loss: 1e-300, elements_generated: 80, state_floats: 0 },
            ],
            totals: RunTotals { steps_run: 10, elements_generated: 80, state_floats: 0, skipped_steps: 1, wall_ms: 0.0 },
            status: RunStatus::ReachedTarget { step: 10 },
        }
    }

    #[test]
    fn csv_roundtrip() {
        let r = sample();
        let text = r.to_csv(EmitOptions::default()).unwrap();
        assert_eq!(RunReport::from_csv(&text).unwrap(), r);
    }

    #[test]
    fn json_roundtrip() {
        let r = sample();
        let text = r.render(Format::Json, EmitOptions::default()).unwrap();
        let v: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(RunReport::from_json(&v).unwrap(), r);
    }

    #[test]
    fn empty_trajectory_is_header_only() {
        let mut r = sample();
        r.rows.clear();
        let text = r.to_csv(EmitOptions::default()).unwrap();
        let data: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(data, vec!["step,loss,elements_generated,state_floats"]);
        assert_eq!(RunReport::from_csv(&text).unwrap().rows.len(), 0);
    }

    #[test]
    fn timing_only_on_request() {
        let mut r = sample();
        r.totals.wall_ms = 12.5;
        assert!(!r.to_csv(EmitOptions::default()).unwrap().contains("wall_ms"));
        assert!(r.to_csv(EmitOptions { timing: true }).unwrap().contains("# wall_ms = 12.5"));
    }

    #[test]
    fn table_quotes_fields() {
        let mut t = Table::new(["name", "value"]).meta("seed", 1);
        t.push(vec![json!("a,b"), json!(0.5)]);
        assert_eq!(t.to_csv().unwrap(), "# seed = 1\nname,value\n\"a,b\",0.5\n");
    }

    #[test]
    fn status_strings() {
        for s in [RunStatus::Completed, RunStatus::Diverged { step: 4 }, RunStatus::ReachedTarget { step: 0 }] {
            assert_eq!(s.to_string().parse::<RunStatus>().unwrap(), s);
        }
    }
}
