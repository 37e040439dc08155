//! Metrics records in a deterministic CSV form.
//!
//! A metrics file is self-describing: `# key=value` lines carry the run
//! identity, the resolved settings (`cfg.*` keys plus a short fingerprint),
//! and summary counts; one header row names the per-batch columns; each
//! batch is one data row. Floats are printed with Rust's shortest
//! round-trip formatting, so identical runs produce byte-identical files
//! and loading recovers the exact values that were written.

use std::fs;
use std::path::Path;

use crate::adapt::{config_fingerprint, BatchMetrics, MetricsRecord};
use crate::{Error, Result};

const COLUMNS: &str =
    "run_id,seed,corruption,severity,epoch,batch_index,n,n_wrong,mean_main_entropy,mean_nsp_entropy";

pub fn metrics_to_csv(record: &MetricsRecord) -> String {
    let mut out = String::new();
    out.push_str(&format!("# run_id={}\n", record.run_id));
    out.push_str(&format!("# mode={}\n", record.mode));
    out.push_str(&format!("# corruption={}\n", record.corruption));
    out.push_str(&format!("# severity={}\n", record.severity));
    out.push_str(&format!("# seed={}\n", record.seed));
    out.push_str(&format!("# config={}\n", record.config_hash()));
    for (k, v) in &record.config {
        out.push_str(&format!("# cfg.{k}={v}\n"));
    }
    out.push_str(COLUMNS);
    out.push('\n');
    for b in &record.batches {
        let nsp = match b.mean_nsp_entropy {
            Some(v) => format!("{v}"),
            None => String::new(),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            record.run_id,
            record.seed,
            record.corruption,
            record.severity,
            b.epoch,
            b.batch_index,
            b.n,
            b.n_wrong,
            b.mean_main_entropy,
            nsp
        ));
    }
    out.push_str(&format!("# aborted_steps={}\n", record.aborted_steps));
    out.push_str(&format!("# final_wrong={}\n", record.final_wrong));
    out.push_str(&format!("# final_total={}\n", record.final_total));
    out
}

fn field_err(path_hint: &str, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path_hint.to_string(),
        detail: detail.into(),
    }
}

pub fn metrics_from_csv(text: &str) -> Result<MetricsRecord> {
    metrics_from_csv_named(text, "<metrics>")
}

fn metrics_from_csv_named(text: &str, path_hint: &str) -> Result<MetricsRecord> {
    let mut meta = std::collections::BTreeMap::new();
    let mut config: Vec<(String, String)> = Vec::new();
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut saw_header = false;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim_end();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim();
            let Some((k, v)) = rest.split_once('=') else {
                return Err(field_err(
                    path_hint,
                    format!("line {}: malformed metadata {line:?}", lineno + 1),
                ));
            };
            let k = k.trim();
            let v = v.trim();
            if let Some(cfg_key) = k.strip_prefix("cfg.") {
                config.push((cfg_key.to_string(), v.to_string()));
            } else {
                meta.insert(k.to_string(), v.to_string());
            }
            continue;
        }
        if line == COLUMNS {
            saw_header = true;
            continue;
        }
        if !saw_header {
            return Err(field_err(
                path_hint,
                format!("line {}: data before column header", lineno + 1),
            ));
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(field_err(
                path_hint,
                format!("line {}: expected 10 fields, got {}", lineno + 1, fields.len()),
            ));
        }
        rows.push(fields.into_iter().map(str::to_string).collect());
    }
    if !saw_header {
        return Err(field_err(path_hint, "missing column header"));
    }

    let want = |key: &str| -> Result<String> {
        meta.get(key)
            .cloned()
            .ok_or_else(|| field_err(path_hint, format!("missing metadata key {key:?}")))
    };
    let want_usize = |key: &str| -> Result<usize> {
        want(key)?.parse().map_err(|_| {
            field_err(path_hint, format!("metadata key {key:?} is not an integer"))
        })
    };
    let run_id = want("run_id")?;
    let corruption = want("corruption")?;
    let severity = want_usize("severity")? as u8;
    let seed: u64 = want("seed")?.parse().map_err(|_| {
        field_err(path_hint, "metadata key \"seed\" is not an integer")
    })?;
    let fingerprint = want("config")?;
    if fingerprint != config_fingerprint(&config) {
        return Err(field_err(
            path_hint,
            "config fingerprint does not match the echoed settings",
        ));
    }

    let mut batches = Vec::with_capacity(rows.len());
    for fields in &rows {
        let parse_usize = |s: &str, what: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| field_err(path_hint, format!("bad {what} {s:?}")))
        };
        let parse_f64 = |s: &str, what: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| field_err(path_hint, format!("bad {what} {s:?}")))
        };
        if fields[0] != run_id
            || fields[1] != seed.to_string()
            || fields[2] != corruption
            || fields[3] != severity.to_string()
        {
            return Err(field_err(
                path_hint,
                format!("row identity disagrees with the header: {:?}", fields.join(",")),
            ));
        }
        batches.push(BatchMetrics {
            epoch: parse_usize(&fields[4], "epoch")?,
            batch_index: parse_usize(&fields[5], "batch index")?,
            n: parse_usize(&fields[6], "batch size")?,
            n_wrong: parse_usize(&fields[7], "error count")?,
            mean_main_entropy: parse_f64(&fields[8], "entropy")?,
            mean_nsp_entropy: if fields[9].is_empty() {
                None
            } else {
                Some(parse_f64(&fields[9], "entropy")?)
            },
        });
    }

    Ok(MetricsRecord {
        run_id,
        mode: want("mode")?,
        corruption,
        severity,
        seed,
        config,
        batches,
        final_wrong: want_usize("final_wrong")?,
        final_total: want_usize("final_total")?,
        aborted_steps: want_usize("aborted_steps")?,
    })
}

pub fn save_metrics(path: &Path, record: &MetricsRecord) -> Result<()> {
    fs::write(path, metrics_to_csv(record)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_metrics(path: &Path) -> Result<MetricsRecord> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    metrics_from_csv_named(&text, &path.display().to_string())
}

/// Mean pre-update prediction entropy over the first and last quarter of a
/// run's final-epoch batches. A falling trend is the expected signature of
/// entropy-shaped adaptation actually tightening predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyTrend {
    pub first_quarter: f64,
    pub last_quarter: f64,
}

pub fn entropy_trend(record: &MetricsRecord) -> Option<EntropyTrend> {
    let last_epoch = record.batches.iter().map(|b| b.epoch).max()?;
    let batches: Vec<&BatchMetrics> = record
        .batches
        .iter()
        .filter(|b| b.epoch == last_epoch)
        .collect();
    if batches.len() < 4 {
        return None;
    }
    let q = batches.len() / 4;
    let mean = |slice: &[&BatchMetrics]| {
        slice.iter().map(|b| b.mean_main_entropy).sum::<f64>() / slice.len() as f64
    };
    Some(EntropyTrend {
        first_quarter: mean(&batches[..q]),
        last_quarter: mean(&batches[batches.len() - q..]),
    })
}

// ─── Aggregate report ───────────────────────────────────────────────────────

/// One line of the aggregate report: all runs sharing a mode, learning
/// rate, corruption, and severity, reduced over their seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub mode: String,
    pub lr: String,
    pub corruption: String,
    pub severity: u8,
    pub seeds: usize,
    pub mean_error: f64,
    pub std_error: f64,
    pub aborted: usize,
    pub trend: Option<EntropyTrend>,
}

fn mode_rank(mode: &str) -> usize {
    const ORDER: [&str; 7] = [
        "source_only",
        "main_only",
        "main_nsp",
        "main_swr",
        "main_swr_nsp_ent",
        "full",
        "supervised_oracle",
    ];
    ORDER.iter().position(|m| *m == mode).unwrap_or(ORDER.len())
}

/// Groups runs by (mode, lr, corruption, severity) and reduces each group
/// to mean and standard deviation over its seeds.
pub fn aggregate_report(records: &[MetricsRecord]) -> Vec<ReportRow> {
    let mut groups: Vec<(String, String, String, u8, Vec<&MetricsRecord>)> = Vec::new();
    for r in records {
        let lr = r.config_value("lr").unwrap_or("-").to_string();
        let key = (r.mode.clone(), lr, r.corruption.clone(), r.severity);
        match groups
            .iter_mut()
            .find(|(m, l, c, s, _)| *m == key.0 && *l == key.1 && *c == key.2 && *s == key.3)
        {
            Some((_, _, _, _, members)) => members.push(r),
            None => groups.push((key.0, key.1, key.2, key.3, vec![r])),
        }
    }
    groups.sort_by(|a, b| {
        (a.2.as_str(), a.3, mode_rank(&a.0), a.1.as_str())
            .cmp(&(b.2.as_str(), b.3, mode_rank(&b.0), b.1.as_str()))
    });

    groups
        .into_iter()
        .map(|(mode, lr, corruption, severity, members)| {
            let errs: Vec<f64> = members.iter().map(|r| r.error_rate()).collect();
            let mean = errs.iter().sum::<f64>() / errs.len() as f64;
            let std = if errs.len() > 1 {
                let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>()
                    / (errs.len() - 1) as f64;
                var.sqrt()
            } else {
                0.0
            };
            let trends: Vec<EntropyTrend> =
                members.iter().filter_map(|r| entropy_trend(r)).collect();
            let trend = if trends.len() == members.len() && !trends.is_empty() {
                Some(EntropyTrend {
                    first_quarter: trends.iter().map(|t| t.first_quarter).sum::<f64>()
                        / trends.len() as f64,
                    last_quarter: trends.iter().map(|t| t.last_quarter).sum::<f64>()
                        / trends.len() as f64,
                })
            } else {
                None
            };
            ReportRow {
                mode,
                lr,
                corruption,
                severity,
                seeds: members.len(),
                mean_error: mean,
                std_error: std,
                aborted: members.iter().map(|r| r.aborted_steps).sum(),
                trend,
            }
        })
        .collect()
}

/// Renders the aggregate report as an aligned text table.
pub fn format_report(records: &[MetricsRecord]) -> String {
    let rows = aggregate_report(records);
    let mut out = String::new();
    out.push_str(&format!(
        "{:<18} {:>8} {:<16} {:>4} {:>6} {:>8} {:>7} {:>8} {:>9} {:>9}\n",
        "mode", "lr", "corruption", "sev", "seeds", "err%", "std", "aborted", "H(first)", "H(last)"
    ));
    for row in rows {
        let (h0, h1) = match &row.trend {
            Some(t) => (
                format!("{:.4}", t.first_quarter),
                format!("{:.4}", t.last_quarter),
            ),
            None => ("-".into(), "-".into()),
        };
        out.push_str(&format!(
            "{:<18} {:>8} {:<16} {:>4} {:>6} {:>8.2} {:>7.2} {:>8} {:>9} {:>9}\n",
            row.mode,
            row.lr,
            row.corruption,
            row.severity,
            row.seeds,
            100.0 * row.mean_error,
            100.0 * row.std_error,
            row.aborted,
            h0,
            h1
        ));
    }
    out
}

/// Renders the aggregate report as CSV.
pub fn report_to_csv(records: &[MetricsRecord]) -> String {
    let rows = aggregate_report(records);
    let mut out = String::from(
        "mode,lr,corruption,severity,seeds,mean_error,std_error,aborted,first_quarter_entropy,last_quarter_entropy\n",
    );
    for row in rows {
        let (h0, h1) = match &row.trend {
            Some(t) => (format!("{}", t.first_quarter), format!("{}", t.last_quarter)),
            None => (String::new(), String::new()),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            row.mode,
            row.lr,
            row.corruption,
            row.severity,
            row.seeds,
            row.mean_error,
            row.std_error,
            row.aborted,
            h0,
            h1
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::AdaptConfig;

    fn sample_record() -> MetricsRecord {
        MetricsRecord {
            run_id: "full-gaussian_noise5-s1".into(),
            mode: "full".into(),
            corruption: "gaussian_noise".into(),
            severity: 5,
            seed: 1,
            config: AdaptConfig::default().canonical_pairs(),
            batches: (0..8)
                .map(|i| BatchMetrics {
                    epoch: 0,
                    batch_index: i,
                    n: 16,
                    n_wrong: 8 - i,
                    mean_main_entropy: 1.5 - 0.1 * i as f64,
                    mean_nsp_entropy: if i % 2 == 0 { Some(0.3 + i as f64) } else { None },
                })
                .collect(),
            final_wrong: 36,
            final_total: 128,
            aborted_steps: 1,
        }
    }

    #[test]
    fn csv_round_trips_exactly() {
        let record = sample_record();
        let text = metrics_to_csv(&record);
        let back = metrics_from_csv(&text).unwrap();
        assert_eq!(record, back);
    }

    #[test]
    fn csv_is_byte_deterministic() {
        let record = sample_record();
        assert_eq!(metrics_to_csv(&record), metrics_to_csv(&record));
    }

    #[test]
    fn files_round_trip() {
        let dir = std::env::temp_dir().join("ttalab-metrics-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.csv");
        let record = sample_record();
        save_metrics(&path, &record).unwrap();
        assert_eq!(load_metrics(&path).unwrap(), record);
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        assert!(metrics_from_csv("").is_err());
        assert!(metrics_from_csv("1,2,3\n").is_err());
        let record = sample_record();
        let text = metrics_to_csv(&record);
        let broken = text.replace("# final_total=128\n", "");
        assert!(metrics_from_csv(&broken).is_err());
        let garbled = text.replace("1.5", "one.five");
        assert!(metrics_from_csv(&garbled).is_err());
    }

    #[test]
    fn tampered_settings_fail_the_fingerprint() {
        let text = metrics_to_csv(&sample_record());
        let tampered = text.replace("# cfg.lr=1\n", "# cfg.lr=17\n");
        assert_ne!(text, tampered);
        let err = metrics_from_csv(&tampered).unwrap_err();
        assert!(err.to_string().contains("fingerprint"));
    }

    #[test]
    fn rows_must_agree_with_the_header_identity() {
        let text = metrics_to_csv(&sample_record());
        let twisted = text.replace(
            "full-gaussian_noise5-s1,1,gaussian_noise,5,0,3,",
            "other-run,1,gaussian_noise,5,0,3,",
        );
        assert_ne!(text, twisted);
        assert!(metrics_from_csv(&twisted).is_err());
    }

    #[test]
    fn trend_splits_final_epoch_quarters() {
        let record = sample_record();
        let trend = entropy_trend(&record).unwrap();
        assert!((trend.first_quarter - 1.45).abs() < 1e-12);
        assert!((trend.last_quarter - 0.85).abs() < 1e-12);
        let mut tiny = record.clone();
        tiny.batches.truncate(3);
        assert!(entropy_trend(&tiny).is_none());
    }

    #[test]
    fn report_groups_runs_over_seeds() {
        let mut a = sample_record();
        a.final_wrong = 30;
        let mut b = sample_record();
        b.run_id = "full-gaussian_noise5-s2".into();
        b.seed = 2;
        b.final_wrong = 40;
        let mut c = sample_record();
        c.run_id = "src".into();
        c.mode = "source_only".into();
        let rows = aggregate_report(&[a, b, c]);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].mode, "source_only");
        assert_eq!(rows[1].mode, "full");
        assert_eq!(rows[1].seeds, 2);
        let expect_mean = (30.0 / 128.0 + 40.0 / 128.0) / 2.0;
        assert!((rows[1].mean_error - expect_mean).abs() < 1e-12);
        assert!(rows[1].std_error > 0.0);
        let table = format_report(&[sample_record()]);
        assert!(table.contains("full"));
        assert_eq!(table.lines().count(), 2);
        let csv = report_to_csv(&[sample_record()]);
        assert!(csv.starts_with("mode,lr,"));
    }
}
