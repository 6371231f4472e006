//! CSV, JSON and `.dat` output.
//!
//! CSV and `.dat` files open with a `# config_digest=<sha256>` comment line.
//! JSON has no comments, so JSON reports carry the digest as a field of the
//! top-level object instead.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::experiments::{CalottePanel, CalotteReport, NormStatsReport, RobustnessMatrix};
use crate::attacks::{write_attack_csv, AdversarialExample, AttackSpec};
use crate::error::{Error, Result};
use crate::geometry::{write_dimension_table_csv, DimensionRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
    Dat,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "dat" => Ok(ReportFormat::Dat),
            other => Err(Error::InvalidArgument(format!("unknown report format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "data", rename_all = "snake_case")]
pub enum Report {
    Dimension(Vec<DimensionRow>),
    NormStats(NormStatsReport),
    Calotte(CalotteReport),
    Matrix(RobustnessMatrix),
    Attack {
        spec: AttackSpec,
        results: Vec<AdversarialExample>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonEnvelope {
    config_digest: String,
    report: Report,
}

/// SHA-256 of the JSON serialization of `config`.
pub fn config_digest<T: Serialize>(config: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(config)?)))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn with_suffix(path: &Path, suffix: &str, ext: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}.{ext}"))
}

fn write_csv_body(report: &Report, out: &mut impl Write) -> Result<()> {
    match report {
        Report::Dimension(rows) => write_dimension_table_csv(rows, out),
        Report::Attack { spec, results } => write_attack_csv(spec, results, out),
        Report::Matrix(m) => {
            let mut w = csv::Writer::from_writer(out);
            let mut header = vec!["attack".to_string()];
            header.extend(m.columns.iter().cloned());
            w.write_record(&header)?;
            for row in &m.rows {
                let mut rec = vec![row.clone()];
                rec.extend(m.columns.iter().map(|c| m.get(row, c).map(|v| v.to_string()).unwrap_or_default()));
                w.write_record(&rec)?;
            }
            w.flush().map_err(|e| Error::io("<csv output>", e))
        }
        Report::NormStats(r) => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(["model", "attack", "epsilon", "mean_l2", "mean_linf", "n"])?;
            for c in &r.cells {
                let n = c.samples.iter().filter(|p| !r.successes_only || p.success).count();
                w.write_record([
                    c.model.clone(),
                    format!("pgd-{}", c.attack),
                    c.epsilon.to_string(),
                    c.mean_l2.to_string(),
                    c.mean_linf.to_string(),
                    n.to_string(),
                ])?;
            }
            w.flush().map_err(|e| Error::io("<csv output>", e))
        }
        Report::Calotte(r) => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(["model", "population", "eps", "linf_ball", "callote", "outside", "n_total"])?;
            for p in [&r.before, &r.after] {
                for (pop, rows) in [("all", &p.rows_all), ("success", &p.rows_success)] {
                    for row in rows {
                        w.write_record([
                            p.model.clone(),
                            pop.to_string(),
                            row.l2_radius.to_string(),
                            row.count_inside_linf.to_string(),
                            row.count_cap_l2.to_string(),
                            row.count_outside.to_string(),
                            row.n_total.to_string(),
                        ])?;
                    }
                }
            }
            w.flush().map_err(|e| Error::io("<csv output>", e))
        }
    }
}

/// Per-sample norms behind a norm-statistics report.
fn write_norm_samples(r: &NormStatsReport, out: &mut impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["model", "attack", "seed", "sample_id", "success", "l2", "linf"])?;
    for c in &r.cells {
        for s in &c.samples {
            w.write_record([
                c.model.clone(),
                format!("pgd-{}", c.attack),
                s.seed.to_string(),
                s.sample_id.to_string(),
                s.success.to_string(),
                s.l2.to_string(),
                s.linf.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))
}

/// Whitespace-separated `eps linf_ball callote outside` table for one panel.
pub fn write_calotte_dat(panel: &CalottePanel, successes_only: bool, digest: &str, out: &mut impl Write) -> Result<()> {
    let io = |e| Error::io("<dat output>", e);
    writeln!(out, "# config_digest={digest}").map_err(io)?;
    writeln!(out, "# model={} population={}", panel.model, if successes_only { "success" } else { "all" })
        .map_err(io)?;
    writeln!(out, "eps linf_ball callote outside").map_err(io)?;
    let rows = if successes_only { &panel.rows_success } else { &panel.rows_all };
    for r in rows {
        writeln!(out, "{} {} {} {}", r.l2_radius, r.count_inside_linf, r.count_cap_l2, r.count_outside).map_err(io)?;
    }
    Ok(())
}

/// Writes `report` next to `path` and returns the files written.
///
/// CSV norm statistics also produce `<stem>_samples.csv`; a calotte report in
/// `.dat` form produces `<stem>_before.dat` and `<stem>_after.dat`, over all
/// C&W outputs or the successful ones as the report's `successes_only` says.
pub fn write_report(report: &Report, format: ReportFormat, path: &Path, digest: &str) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    match format {
        ReportFormat::Json => {
            let mut f = create(path)?;
            let env = JsonEnvelope {
                config_digest: digest.to_string(),
                report: report.clone(),
            };
            serde_json::to_writer_pretty(&mut f, &env)?;
            writeln!(f).map_err(|e| Error::io(path, e))?;
            f.flush().map_err(|e| Error::io(path, e))?;
            written.push(path.to_path_buf());
        }
        ReportFormat::Csv => {
            let mut f = create(path)?;
            writeln!(f, "# config_digest={digest}").map_err(|e| Error::io(path, e))?;
            write_csv_body(report, &mut f)?;
            f.flush().map_err(|e| Error::io(path, e))?;
            written.push(path.to_path_buf());
            if let Report::NormStats(r) = report {
                let p = with_suffix(path, "_samples", "csv");
                let mut f = create(&p)?;
                writeln!(f, "# config_digest={digest}").map_err(|e| Error::io(&p, e))?;
                write_norm_samples(r, &mut f)?;
                f.flush().map_err(|e| Error::io(&p, e))?;
                written.push(p);
            }
        }
        ReportFormat::Dat => {
            let Report::Calotte(r) = report else {
                return Err(Error::InvalidArgument("only calotte reports have a .dat form".into()));
            };
            for (name, panel) in [("before", &r.before), ("after", &r.after)] {
                let p = with_suffix(path, &format!("_{name}"), "dat");
                let mut f = create(&p)?;
                write_calotte_dat(panel, r.successes_only, digest, &mut f)?;
                f.flush().map_err(|e| Error::io(&p, e))?;
                written.push(p);
            }
        }
    }
    Ok(written)
}

/// Reads a JSON report written by [`write_report`]; returns the digest and
/// the report.
pub fn read_json_report(path: &Path) -> Result<(String, Report)> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let env: JsonEnvelope = serde_json::from_str(&s)?;
    Ok((env.config_digest, env.report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_stable() {
        let a = config_digest(&serde_json::json!({"a": 1})).unwrap();
        assert_eq!(a, config_digest(&serde_json::json!({"a": 1})).unwrap());
        assert_ne!(a, config_digest(&serde_json::json!({"a": 2})).unwrap());
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn suffix_paths() {
        assert_eq!(with_suffix(Path::new("out/cal.dat"), "_before", "dat"), PathBuf::from("out/cal_before.dat"));
    }
}
