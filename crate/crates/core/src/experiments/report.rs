use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ARTIFACT_VERSION: &str = concat!("rgia-", env!("CARGO_PKG_VERSION"));

/// Prefix marking wall-clock columns in report CSVs.
pub const TIMING_PREFIX: &str = "time_";

const KEY_COLUMNS: [&str; 7] = [
    "experiment",
    "env",
    "arm",
    "seed",
    "trial",
    "config_hash",
    "version",
];

/// One measured cell of an experiment: an arm evaluated on one seed (and,
/// where the experiment has several, one packet trial).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment: String,
    pub env: String,
    pub arm: String,
    pub seed: u64,
    pub trial: usize,
    pub config_hash: String,
    pub version: String,
    pub metrics: BTreeMap<String, f64>,
    /// Wall-clock measurements, in seconds. Dropped in deterministic output.
    #[serde(default)]
    pub timing: BTreeMap<String, f64>,
}

impl ReportRow {
    pub fn new(experiment: &str, env: &str, arm: &str, seed: u64, config_hash: &str) -> Self {
        ReportRow {
            experiment: experiment.into(),
            env: env.into(),
            arm: arm.into(),
            seed,
            trial: 0,
            config_hash: config_hash.into(),
            version: ARTIFACT_VERSION.into(),
            metrics: BTreeMap::new(),
            timing: BTreeMap::new(),
        }
    }

    pub fn with_trial(mut self, trial: usize) -> Self {
        self.trial = trial;
        self
    }

    pub fn set(&mut self, name: &str, value: f64) -> &mut Self {
        self.metrics.insert(name.into(), value);
        self
    }

    pub fn set_time(&mut self, name: &str, secs: f64) -> &mut Self {
        self.timing.insert(name.into(), secs);
        self
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EmitOptions {
    /// Leave out timing columns so reruns are byte-identical.
    pub deterministic: bool,
}

fn columns(rows: &[ReportRow], opts: EmitOptions) -> (Vec<String>, Vec<String>) {
    let mut metrics: Vec<String> = rows
        .iter()
        .flat_map(|r| r.metrics.keys().cloned())
        .collect();
    metrics.sort();
    metrics.dedup();
    let mut timing: Vec<String> = if opts.deterministic {
        Vec::new()
    } else {
        rows.iter().flat_map(|r| r.timing.keys().cloned()).collect()
    };
    timing.sort();
    timing.dedup();
    (metrics, timing)
}

fn fmt_value(v: Option<&f64>) -> String {
    v.map(|v| format!("{v:e}")).unwrap_or_default()
}

/// Wide CSV: key columns, then sorted metric columns, then timing columns.
pub fn rows_to_csv(rows: &[ReportRow], opts: EmitOptions) -> Result<String> {
    let (metrics, timing) = columns(rows, opts);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = KEY_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(metrics.iter().cloned());
    header.extend(timing.iter().map(|t| format!("{TIMING_PREFIX}{t}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.experiment.clone(),
            r.env.clone(),
            r.arm.clone(),
            r.seed.to_string(),
            r.trial.to_string(),
            r.config_hash.clone(),
            r.version.clone(),
        ];
        rec.extend(metrics.iter().map(|m| fmt_value(r.metrics.get(m))));
        rec.extend(timing.iter().map(|t| fmt_value(r.timing.get(t))));
        w.write_record(&rec)?;
    }
    finish(w)
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Parses the output of [`rows_to_csv`].
pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = rd.headers()?.iter().map(String::from).collect();
    if header.len() < KEY_COLUMNS.len() || header[..KEY_COLUMNS.len()] != KEY_COLUMNS {
        return Err(Error::Config("report csv: unexpected header".into()));
    }
    let bad = |what: &str| Error::Config(format!("report csv: bad {what}"));
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let mut row = ReportRow {
            experiment: rec[0].into(),
            env: rec[1].into(),
            arm: rec[2].into(),
            seed: rec[3].parse().map_err(|_| bad("seed"))?,
            trial: rec[4].parse().map_err(|_| bad("trial"))?,
            config_hash: rec[5].into(),
            version: rec[6].into(),
            metrics: BTreeMap::new(),
            timing: BTreeMap::new(),
        };
        for (name, field) in header.iter().zip(rec.iter()).skip(KEY_COLUMNS.len()) {
            if field.is_empty() {
                continue;
            }
            let v: f64 = field.parse().map_err(|_| bad(name))?;
            match name.strip_prefix(TIMING_PREFIX) {
                Some(t) => row.timing.insert(t.into(), v),
                None => row.metrics.insert(name.clone(), v),
            };
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Plot-ready long format: one line per (row, metric).
pub fn rows_to_long_csv(rows: &[ReportRow], opts: EmitOptions) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "experiment",
        "env",
        "arm",
        "seed",
        "trial",
        "metric",
        "value",
    ])?;
    for r in rows {
        let timing = if opts.deterministic {
            None
        } else {
            Some(&r.timing)
        };
        let named = r.metrics.iter().map(|(k, v)| (k.clone(), *v)).chain(
            timing
                .into_iter()
                .flatten()
                .map(|(k, v)| (format!("{TIMING_PREFIX}{k}"), *v)),
        );
        for (name, v) in named {
            w.write_record([
                r.experiment.clone(),
                r.env.clone(),
                r.arm.clone(),
                r.seed.to_string(),
                r.trial.to_string(),
                name,
                format!("{v:e}"),
            ])?;
        }
    }
    finish(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, std, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub rows: usize,
    pub metrics: BTreeMap<String, Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub experiment: String,
    pub env: String,
    pub version: String,
    pub config_hashes: Vec<String>,
    pub arms: Vec<ArmSummary>,
}

/// Mean and standard deviation of every metric per arm, arms in order of
/// first appearance.
pub fn summarize(rows: &[ReportRow], opts: EmitOptions) -> ReportSummary {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.arm.as_str()) {
            order.push(&r.arm);
        }
    }
    let arms = order
        .iter()
        .map(|arm| {
            let mine: Vec<&ReportRow> = rows.iter().filter(|r| r.arm == *arm).collect();
            let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for r in &mine {
                for (k, v) in &r.metrics {
                    values.entry(k.clone()).or_default().push(*v);
                }
                if !opts.deterministic {
                    for (k, v) in &r.timing {
                        values
                            .entry(format!("{TIMING_PREFIX}{k}"))
                            .or_default()
                            .push(*v);
                    }
                }
            }
            ArmSummary {
                arm: arm.to_string(),
                rows: mine.len(),
                metrics: values
                    .into_iter()
                    .filter_map(|(k, v)| Stat::of(&v).map(|s| (k, s)))
                    .collect(),
            }
        })
        .collect();
    let mut hashes: Vec<String> = rows.iter().map(|r| r.config_hash.clone()).collect();
    hashes.sort();
    hashes.dedup();
    let first = rows.first();
    ReportSummary {
        experiment: first.map(|r| r.experiment.clone()).unwrap_or_default(),
        env: first.map(|r| r.env.clone()).unwrap_or_default(),
        version: ARTIFACT_VERSION.into(),
        config_hashes: hashes,
        arms,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub csv: PathBuf,
    pub summary: PathBuf,
    pub long_csv: PathBuf,
}

/// Writes `<name>.csv`, `<name>_summary.json` and `<name>_long.csv` into `dir`.
pub fn emit_report(
    rows: &[ReportRow],
    dir: &Path,
    name: &str,
    opts: EmitOptions,
) -> Result<ReportFiles> {
    std::fs::create_dir_all(dir)?;
    let files = ReportFiles {
        csv: dir.join(format!("{name}.csv")),
        summary: dir.join(format!("{name}_summary.json")),
        long_csv: dir.join(format!("{name}_long.csv")),
    };
    std::fs::write(&files.csv, rows_to_csv(rows, opts)?)?;
    let mut json = serde_json::to_string_pretty(&summarize(rows, opts))?;
    json.push('\n');
    std::fs::write(&files.summary, json)?;
    std::fs::write(&files.long_csv, rows_to_long_csv(rows, opts)?)?;
    Ok(files)
}
