use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::experiment::ExperimentSpec;
use crate::error::{Error, Result};
use crate::estimators::{Metric, Space};

/// Column order of the CSV form. Optional columns are left empty when absent.
pub const CSV_HEADER: &str = "index,group,space,metric,temperature,param,exact,estimated,abs_error,exact_min,exact_max,rel_orth,variance,tag";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Validation(format!(
                "unknown report format `{other}` (expected csv or json)"
            ))),
        }
    }
}

/// One measurement.
///
/// `index` is the layer, step, ε position or pair number depending on the
/// experiment; `group` is the branch, layer tag or probe space. `exact`,
/// `estimated` and `abs_error` are means when the row aggregates samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub index: u64,
    pub group: String,
    pub space: Space,
    pub metric: Metric,
    pub temperature: Option<f64>,
    pub param: Option<f64>,
    pub exact: f64,
    pub estimated: f64,
    pub abs_error: f64,
    pub exact_min: f64,
    pub exact_max: f64,
    pub rel_orth: Option<f64>,
    pub variance: Option<f64>,
    pub tag: String,
}

impl ReportRow {
    /// A row for a single sample.
    pub fn single(
        index: u64,
        group: impl Into<String>,
        space: Space,
        metric: Metric,
        exact: f64,
        estimated: f64,
    ) -> Self {
        Self {
            index,
            group: group.into(),
            space,
            metric,
            temperature: None,
            param: None,
            exact,
            estimated,
            abs_error: (estimated - exact).abs(),
            exact_min: exact,
            exact_max: exact,
            rel_orth: None,
            variance: None,
            tag: String::new(),
        }
    }

    fn sort_cmp(&self, other: &Self) -> Ordering {
        let opt = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(x), Some(y)) => x.total_cmp(&y),
            (a, b) => a.is_some().cmp(&b.is_some()),
        };
        self.index
            .cmp(&other.index)
            .then_with(|| self.group.cmp(&other.group))
            .then_with(|| self.space.cmp(&other.space))
            .then_with(|| self.metric.cmp(&other.metric))
            .then_with(|| opt(self.temperature, other.temperature))
            .then_with(|| opt(self.param, other.param))
    }

    /// The row's numeric columns in CSV order.
    pub fn numeric(&self) -> [Option<f64>; 9] {
        [
            self.temperature,
            self.param,
            Some(self.exact),
            Some(self.estimated),
            Some(self.abs_error),
            Some(self.exact_min),
            Some(self.exact_max),
            self.rel_orth,
            self.variance,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub tool: String,
    pub version: String,
    /// The fully resolved experiment; re-running it reproduces the report.
    pub spec: ExperimentSpec,
    /// Seeds, resolved prompts, generated tokens, convergence orders and the like.
    pub details: BTreeMap<String, serde_json::Value>,
    pub warnings: Vec<String>,
}

impl Metadata {
    pub fn new(spec: ExperimentSpec) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            spec,
            details: BTreeMap::new(),
            warnings: Vec::new(),
        }
    }

    pub fn insert(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).expect("serializable metadata");
        self.details.insert(key.to_string(), v);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub metadata: Metadata,
    pub rows: Vec<ReportRow>,
}

fn fmt_num(out: &mut String, v: Option<f64>) {
    if let Some(v) = v {
        // 17 significant digits: round-trips every f64
        write!(out, "{v:.16e}").expect("write to string");
    }
}

fn check_field(s: &str) -> Result<()> {
    if s.contains([',', '\n', '\r', '"']) {
        return Err(Error::Validation(format!(
            "report field `{s}` contains a CSV delimiter"
        )));
    }
    Ok(())
}

impl Report {
    /// Sorts rows by `(index, group, space, metric, temperature, param)` and checks finiteness.
    pub fn new(metadata: Metadata, mut rows: Vec<ReportRow>) -> Result<Self> {
        for r in &rows {
            if !r.exact.is_finite() || !r.estimated.is_finite() {
                return Err(Error::Invariant(format!(
                    "non-finite value in row {} {} {}",
                    r.index,
                    r.group,
                    r.space.as_str()
                )));
            }
        }
        rows.sort_by(ReportRow::sort_cmp);
        Ok(Self { metadata, rows })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            check_field(&r.group)?;
            check_field(&r.tag)?;
            write!(
                out,
                "{},{},{},{}",
                r.index,
                r.group,
                r.space.as_str(),
                r.metric.as_str()
            )
            .expect("write to string");
            for v in r.numeric() {
                out.push(',');
                fmt_num(&mut out, v);
            }
            out.push(',');
            out.push_str(&r.tag);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plain data");
        s.push('\n');
        s
    }

    pub fn render(&self, format: ReportFormat) -> Result<String> {
        match format {
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Json => Ok(self.to_json()),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "<report>".into(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

fn parse_space(s: &str) -> Option<Space> {
    [Space::Embedding, Space::Logit, Space::Probability]
        .into_iter()
        .find(|x| x.as_str() == s)
}

fn parse_metric(s: &str) -> Option<Metric> {
    [Metric::AngularDeviation, Metric::Kl]
        .into_iter()
        .find(|x| x.as_str() == s)
}

/// Parses rows back from the CSV form.
pub fn parse_csv(text: &str) -> Result<Vec<ReportRow>> {
    let err = |line: usize, message: String| Error::Parse {
        path: "<csv>".into(),
        line,
        message,
    };
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => return Err(err(1, format!("unexpected header {other:?}"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 14 {
            return Err(err(n, format!("expected 14 fields, found {}", f.len())));
        }
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                return Ok(None);
            }
            s.parse::<f64>()
                .map(Some)
                .map_err(|e| err(n, format!("bad number `{s}`: {e}")))
        };
        let req =
            |s: &str| -> Result<f64> { opt(s)?.ok_or_else(|| err(n, "missing value".into())) };
        rows.push(ReportRow {
            index: f[0]
                .parse()
                .map_err(|e| err(n, format!("bad index: {e}")))?,
            group: f[1].to_string(),
            space: parse_space(f[2]).ok_or_else(|| err(n, format!("unknown space `{}`", f[2])))?,
            metric: parse_metric(f[3])
                .ok_or_else(|| err(n, format!("unknown metric `{}`", f[3])))?,
            temperature: opt(f[4])?,
            param: opt(f[5])?,
            exact: req(f[6])?,
            estimated: req(f[7])?,
            abs_error: req(f[8])?,
            exact_min: req(f[9])?,
            exact_max: req(f[10])?,
            rel_orth: opt(f[11])?,
            variance: opt(f[12])?,
            tag: f[13].to_string(),
        });
    }
    Ok(rows)
}

/// Writes `report` to `path` in `format`.
pub fn emit_report(report: &Report, format: ReportFormat, path: &Path) -> Result<()> {
    let text = report.render(format)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
