//! Report rows, the report CSV, the JSON sidecar and plot series.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// One measured statistic. `seed` names every seed needed to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub run_id: String,
    pub statistic: String,
    pub n: Option<i64>,
    pub p: f64,
    pub d: usize,
    pub seed: String,
    pub value: f64,
    pub stderr: Option<f64>,
}

/// Outcome of a trend or bound check configured on an experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fingerprint {
    pub seed: u64,
    pub sites: usize,
    pub open_fraction: f64,
    pub digest: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DiagnosticReport {
    pub run_id: String,
    pub experiment: String,
    pub rows: Vec<Row>,
    pub checks: Vec<Check>,
    pub fingerprints: Vec<Fingerprint>,
    pub outputs: Vec<String>,
    pub wall_clock_seconds: f64,
    pub cache_hits: u64,
}

impl DiagnosticReport {
    pub fn rows_named<'a>(&'a self, statistic: &'a str) -> impl Iterator<Item = &'a Row> + 'a {
        self.rows.iter().filter(move |r| r.statistic == statistic)
    }

    /// The single value of `statistic` at `n`, if present.
    pub fn value(&self, statistic: &str, n: Option<i64>) -> Option<f64> {
        self.rows_named(statistic).find(|r| r.n == n).map(|r| r.value)
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Short stable id of a canonical config text.
pub fn run_id(canonical: &str) -> String {
    let digest = Sha256::digest(canonical.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_rows<W: Write>(w: W, rows: &[Row]) -> Result<(), CliError> {
    let mut wr = csv::Writer::from_writer(w);
    if rows.is_empty() {
        wr.write_record(["run_id", "statistic", "n", "p", "d", "seed", "value", "stderr"])?;
    }
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_rows<R: Read>(r: R) -> Result<Vec<Row>, CliError> {
    let mut rd = csv::Reader::from_reader(r);
    rd.deserialize().map(|r| r.map_err(CliError::from)).collect()
}

pub fn write_sidecar(path: &Path, report: &DiagnosticReport) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct Sidecar<'a> {
        run_id: &'a str,
        experiment: &'a str,
        version: &'a str,
        wall_clock_seconds: f64,
        cache_hits: u64,
        checks: &'a [Check],
        fingerprints: &'a [Fingerprint],
        outputs: &'a [String],
    }
    let s = Sidecar {
        run_id: &report.run_id,
        experiment: &report.experiment,
        version: env!("CARGO_PKG_VERSION"),
        wall_clock_seconds: report.wall_clock_seconds,
        cache_hits: report.cache_hits,
        checks: &report.checks,
        fingerprints: &report.fingerprints,
        outputs: &report.outputs,
    };
    std::fs::write(path, serde_json::to_string_pretty(&s)? + "\n")?;
    Ok(())
}

/// Which row field becomes `x` and which becomes `group`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    N,
    Seed,
    None,
}

impl std::str::FromStr for Axis {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "n" => Ok(Axis::N),
            "seed" => Ok(Axis::Seed),
            "none" => Ok(Axis::None),
            _ => Err(CliError::Config(format!("axis must be n, seed or none, got '{s}'"))),
        }
    }
}

#[derive(Debug, Serialize)]
struct PlotRow<'a> {
    x: String,
    y: f64,
    group: &'a str,
    stderr: Option<f64>,
}

fn axis_value(r: &Row, a: Axis) -> String {
    match a {
        Axis::N => r.n.map(|v| v.to_string()).unwrap_or_default(),
        Axis::Seed => r.seed.clone(),
        Axis::None => String::new(),
    }
}

/// Long-format `(x, y, group, stderr)` series of one statistic; a fitted
/// slope stored as `<statistic>_fit_slope` is appended with `x = slope`.
pub fn emit_plotdata<W: Write>(w: W, rows: &[Row], statistic: &str, x: Axis, group: Axis) -> Result<usize, CliError> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wr.write_record(["x", "y", "group", "stderr"])?;
    let mut count = 0;
    for r in rows.iter().filter(|r| !statistic.is_empty() && r.statistic == statistic) {
        let g = axis_value(r, group);
        wr.serialize(PlotRow {
            x: axis_value(r, x),
            y: r.value,
            group: &g,
            stderr: r.stderr,
        })?;
        count += 1;
    }
    let slope = format!("{statistic}_fit_slope");
    for r in rows.iter().filter(|r| !statistic.is_empty() && r.statistic == slope) {
        wr.serialize(PlotRow {
            x: "slope".into(),
            y: r.value,
            group: "fit",
            stderr: r.stderr,
        })?;
        count += 1;
    }
    wr.flush()?;
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(stat: &str, n: i64, v: f64) -> Row {
        Row {
            run_id: "r".into(),
            statistic: stat.into(),
            n: Some(n),
            p: 0.8,
            d: 1,
            seed: "base=1".into(),
            value: v,
            stderr: None,
        }
    }

    #[test]
    fn rows_round_trip() {
        let rows = vec![row("a", 1, 0.5), row("b", 2, 1e-300)];
        let mut buf = Vec::new();
        write_rows(&mut buf, &rows).unwrap();
        assert_eq!(read_rows(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn plot_series() {
        let rows = vec![row("e", 25, 0.3), row("e", 50, 0.2), row("x", 1, 0.0), row("e_fit_slope", 0, -0.1)];
        let mut buf = Vec::new();
        assert_eq!(emit_plotdata(&mut buf, &rows, "e", Axis::N, Axis::None).unwrap(), 3);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x,y,group,stderr\n25,0.3,,\n"));
        assert!(text.ends_with("slope,-0.1,fit,\n"));
        let mut buf = Vec::new();
        assert_eq!(emit_plotdata(&mut buf, &rows, "", Axis::N, Axis::None).unwrap(), 0);
        assert_eq!(String::from_utf8(buf).unwrap(), "x,y,group,stderr\n");
    }

    #[test]
    fn ids_are_stable() {
        assert_eq!(run_id("a"), run_id("a"));
        assert_ne!(run_id("a"), run_id("b"));
        assert_eq!(run_id("a").len(), 16);
    }
}
