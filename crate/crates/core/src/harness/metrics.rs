//! Metrics CSV: a fixed header and one row per evaluation point, floats
//! written like C's `%.9g`.

use std::fs::File;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::ssm::LossBreakdown;

pub const HEADER: [&str; 11] = [
    "env_step",
    "episode_return_mean",
    "recon",
    "reward",
    "cont",
    "kl_dyn",
    "kl_rep",
    "total",
    "policy_loss",
    "critic_loss",
    "wall_ms",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRow {
    pub env_step: u64,
    pub episode_return_mean: f64,
    pub wm: LossBreakdown,
    pub policy_loss: f64,
    pub critic_loss: f64,
    pub wall_ms: u64,
}

impl MetricsRow {
    pub fn fields(&self) -> Vec<String> {
        let w = &self.wm;
        let mut out = vec![self.env_step.to_string()];
        out.extend(
            [
                self.episode_return_mean,
                w.recon,
                w.reward,
                w.cont,
                w.kl_dyn,
                w.kl_rep,
                w.total,
                self.policy_loss,
                self.critic_loss,
            ]
            .iter()
            .map(|&v| fmt_g9(v)),
        );
        out.push(self.wall_ms.to_string());
        out
    }
}

/// `printf("%.9g", x)`.
pub fn fmt_g9(x: f64) -> String {
    const P: i32 = 9;
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.*e}", (P - 1) as usize, x);
    let (mant, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if exp < -4 || exp >= P {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mant), exp.abs())
    } else {
        trim(&format!("{:.*}", (P - 1 - exp) as usize, x))
    }
}

/// Appends rows to a metrics file, flushing after each one.
pub struct MetricsWriter {
    path: PathBuf,
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    /// Creates (truncates) the file and writes the header.
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Self {
            path: path.to_path_buf(),
            inner: csv::Writer::from_writer(file),
        };
        w.write(HEADER.iter().map(|s| s.to_string()).collect())?;
        Ok(w)
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        self.write(row.fields())
    }

    fn write(&mut self, fields: Vec<String>) -> Result<()> {
        let io = |e: std::io::Error| Error::io(&self.path, e);
        self.inner.write_record(&fields).map_err(|e| io(e.into()))?;
        self.inner.flush().map_err(io)
    }
}

/// A parsed metrics file: the header and every row as numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl MetricsTable {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }
}

/// Physical 1-based line of the record starting at `pos`. The reader's own
/// line counter and offsets both include skipped blank lines.
fn line_at(text: &str, pos: Option<&csv::Position>) -> usize {
    let Some(p) = pos else { return 0 };
    let bytes = text.as_bytes();
    let mut at = (p.byte() as usize).min(bytes.len());
    while at < bytes.len() && (bytes[at] == b'\n' || bytes[at] == b'\r') {
        at += 1;
    }
    bytes[..at].iter().filter(|&&b| b == b'\n').count() + 1
}

pub fn parse_metrics(text: &str) -> Result<MetricsTable> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let csv_error = |e: csv::Error| Error::Csv {
        line: line_at(text, e.position()),
        msg: e.to_string(),
    };
    let header: Vec<String> = rd.headers().map_err(csv_error)?.iter().map(str::to_string).collect();
    if header.first().map(String::as_str) != Some("env_step") {
        return Err(Error::Csv {
            line: 1,
            msg: "first column must be env_step".into(),
        });
    }
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_error)?;
        let line = line_at(text, rec.position());
        let row = rec
            .iter()
            .map(|f| {
                f.trim().parse::<f64>().map_err(|_| Error::Csv {
                    line,
                    msg: format!("`{f}` is not a number"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(MetricsTable { header, rows })
}

pub fn read_metrics(path: &Path) -> Result<MetricsTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics(&text)
}
