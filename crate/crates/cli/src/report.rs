//! Plot-ready tables from a simulation run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use fusionlab_core::design::Method;
use fusionlab_core::fusion::{risk_curve, RiskTerms};
use fusionlab_core::output::atomic_write;
use fusionlab_core::simlab::SimConfig;

use crate::simulate::TRACE_DIR;
use crate::UsageError;

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub round: usize,
    pub lambda_hat: f64,
    pub eure: f64,
    pub cum_loss: f64,
    pub terms: RiskTerms,
}

#[derive(Debug, Clone)]
pub struct LoadedTrace {
    pub method: Method,
    /// 1-based, as in the file name.
    pub replication: usize,
    pub rows: Vec<TraceRow>,
}

fn csv_rows(path: &Path) -> anyhow::Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect())
}

fn num<T: std::str::FromStr>(path: &Path, row: usize, s: &str) -> anyhow::Result<T> {
    s.trim()
        .parse()
        .map_err(|_| UsageError(anyhow!("{}: row {}: cannot parse {s:?}", path.display(), row + 2)).into())
}

/// Parses `<method>_rep<NNN>.csv`.
fn trace_name(name: &str) -> Option<(Method, usize)> {
    let stem = name.strip_suffix(".csv")?;
    let (m, rep) = stem.split_once("_rep")?;
    let rep: usize = rep.parse().ok()?;
    Some((m.parse().ok()?, rep))
}

pub fn load_traces(run: &Path) -> anyhow::Result<Vec<LoadedTrace>> {
    let dir = run.join(TRACE_DIR);
    let entries = std::fs::read_dir(&dir)
        .with_context(|| format!("{} has no {TRACE_DIR}/ directory", run.display()))
        .map_err(UsageError)?;
    let mut found: Vec<(Method, usize, PathBuf)> = Vec::new();
    for e in entries {
        let path = e?.path();
        if let Some((m, rep)) = path.file_name().and_then(|n| n.to_str()).and_then(trace_name) {
            found.push((m, rep, path));
        }
    }
    if found.is_empty() {
        return Err(UsageError(anyhow!("no traces found in {}", dir.display())).into());
    }
    found.sort_by_key(|f| (f.0, f.1));
    let mut out = Vec::with_capacity(found.len());
    for (method, replication, path) in found {
        let terms_path = path.with_file_name(format!("{method}_rep{replication:03}_terms.csv"));
        let main = csv_rows(&path)?;
        let terms = csv_rows(&terms_path).map_err(UsageError)?;
        if main.len() != terms.len() {
            return Err(UsageError(anyhow!("{} and its terms file disagree on round count", path.display())).into());
        }
        let mut rows = Vec::with_capacity(main.len());
        for (i, (r, t)) in main.iter().zip(&terms).enumerate() {
            if r.len() < 5 || t.len() != 4 {
                return Err(UsageError(anyhow!("{}: row {} is malformed", path.display(), i + 2)).into());
            }
            rows.push(TraceRow {
                round: num(&path, i, &r[0])?,
                lambda_hat: num(&path, i, &r[1])?,
                eure: num(&path, i, &r[2])?,
                cum_loss: num(&path, i, &r[4])?,
                terms: RiskTerms {
                    trace: num(&terms_path, i, &t[1])?,
                    quad: num(&terms_path, i, &t[2])?,
                    cross: num(&terms_path, i, &t[3])?,
                },
            });
        }
        out.push(LoadedTrace {
            method,
            replication,
            rows,
        });
    }
    Ok(out)
}

/// `lambda,eure,is_lambda_hat`; the flagged row is the grid point nearest `lambda_hat`.
pub fn curve_table(terms: &RiskTerms, lambda_hat: f64, points: usize) -> String {
    let curve = risk_curve(terms, points);
    let nearest = curve
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 .0 - lambda_hat).abs().total_cmp(&(b.1 .0 - lambda_hat).abs()))
        .map_or(0, |(i, _)| i);
    let mut s = String::from("lambda,eure,is_lambda_hat\n");
    for (i, (l, r)) in curve.iter().enumerate() {
        let _ = writeln!(s, "{l},{r},{}", u8::from(i == nearest));
    }
    s
}

/// Wide table `round,<m>_mean_cum_loss,<m>_se_cum_loss,<m>_mean_lambda,...`.
pub fn cumulative_table(traces: &[LoadedTrace]) -> String {
    let mut by_method: BTreeMap<Method, Vec<&LoadedTrace>> = BTreeMap::new();
    for t in traces {
        by_method.entry(t.method).or_default().push(t);
    }
    let rounds = traces.iter().map(|t| t.rows.len()).max().unwrap_or(0);
    let mut s = String::from("round");
    for m in by_method.keys() {
        let _ = write!(s, ",{m}_mean_cum_loss,{m}_se_cum_loss,{m}_mean_lambda");
    }
    s.push('\n');
    for r in 0..rounds {
        let _ = write!(s, "{}", r + 1);
        for ts in by_method.values() {
            let rows: Vec<&TraceRow> = ts.iter().filter_map(|t| t.rows.get(r)).collect();
            let n = rows.len() as f64;
            let mean = rows.iter().map(|x| x.cum_loss).sum::<f64>() / n;
            let se = if rows.len() > 1 {
                (rows.iter().map(|x| (x.cum_loss - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
            } else {
                0.0
            };
            let lam = rows.iter().map(|x| x.lambda_hat).sum::<f64>() / n;
            let _ = write!(s, ",{mean},{se},{lam}");
        }
        s.push('\n');
    }
    s
}

/// Writes the tables into `out` and returns the written paths.
pub fn run(run_dir: &Path, out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let cfg_text = std::fs::read_to_string(run_dir.join("config.toml"))
        .with_context(|| format!("{} is not a run directory (no config.toml)", run_dir.display()))
        .map_err(UsageError)?;
    let cfg: SimConfig = toml::from_str(&cfg_text)
        .with_context(|| format!("cannot parse {}/config.toml", run_dir.display()))
        .map_err(UsageError)?;
    let traces = load_traces(run_dir)?;
    let points = cfg.experiment.curve_points;
    let mut written = Vec::new();
    let mut emit = |rel: PathBuf, body: String| -> anyhow::Result<()> {
        let p = out.join(rel);
        atomic_write(&p, body.as_bytes())?;
        written.push(p);
        Ok(())
    };

    let mut marks = String::from("selector,replication,round,lambda_hat,eure\n");
    for t in &traces {
        for r in &t.rows {
            let _ = writeln!(marks, "{},{},{},{},{}", t.method, t.replication, r.round, r.lambda_hat, r.eure);
        }
    }
    emit("lambda_hat.csv".into(), marks)?;

    // Risk curves for the first replication of each selector.
    let mut seen = Vec::new();
    for t in &traces {
        if seen.contains(&t.method) {
            continue;
        }
        seen.push(t.method);
        for r in &t.rows {
            emit(
                Path::new("curves").join(format!("{}_rep{:03}_round{:03}.csv", t.method, t.replication, r.round)),
                curve_table(&r.terms, r.lambda_hat, points),
            )?;
        }
    }
    emit("cumulative_risk.csv".into(), cumulative_table(&traces))?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_names() {
        assert_eq!(trace_name("thompson_rep007.csv"), Some((Method::Thompson, 7)));
        assert_eq!(trace_name("thompson_rep007_terms.csv"), None);
        assert_eq!(trace_name("aggregate.csv"), None);
    }

    #[test]
    fn curve_marks_minimum() {
        let t = RiskTerms {
            trace: 1.0,
            quad: 2.0,
            cross: -0.5,
        };
        let table = curve_table(&t, 0.25, 101);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 102);
        assert_eq!(lines[26], "0.25,0.875,1");
    }
}
