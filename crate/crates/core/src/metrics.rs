//! Reconstruction quality and consistency metrics.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::attack::TransitionModel;
use crate::envs::{expected_next_state, EnvSpec};
use crate::error::{Error, Result};
use crate::frlcore::{td_value_and_grad, GradientPacket, NetSnapshot, TdSetup};
use crate::numcore::{check_len, squared_distance};

/// PSNR reported for (near-)identical images.
pub const PSNR_CAP: f64 = 100.0;

/// Infinity-norm tolerance under which a continuous action counts as recovered.
pub const CONTINUOUS_ACTION_TOL: f64 = 0.05;

pub fn mse(x: &[f64], y: &[f64]) -> Result<f64> {
    check_len(x.len(), y.len(), "mse operand")?;
    if x.is_empty() {
        return Err(Error::invalid("mse of empty vectors"));
    }
    Ok(squared_distance(x, y) / x.len() as f64)
}

/// Fraction of positions where `pred` equals `truth`.
pub fn recovery_accuracy<T: PartialEq>(pred: &[T], truth: &[T]) -> Result<f64> {
    check_len(truth.len(), pred.len(), "recovered actions")?;
    if pred.is_empty() {
        return Err(Error::invalid("recovery accuracy of nothing"));
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Whether a reconstructed action encoding matches the true one: exact for
/// discrete actions, within [`CONTINUOUS_ACTION_TOL`] for continuous ones.
pub fn action_matches(
    env: &EnvSpec,
    pred: &crate::envs::Action,
    truth: &crate::envs::Action,
) -> bool {
    use crate::envs::Action;
    match (pred, truth) {
        (Action::Discrete(a), Action::Discrete(b)) => a == b,
        (Action::Continuous(a), Action::Continuous(b)) => {
            a.len() == b.len()
                && env.check_action(truth).is_ok()
                && a.iter()
                    .zip(b.iter())
                    .all(|(x, y)| (x - y).abs() < CONTINUOUS_ACTION_TOL)
        }
        _ => false,
    }
}

pub fn psnr(a: &[f64], b: &[f64], max_val: f64) -> Result<f64> {
    let e = mse(a, b)?;
    if e < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (max_val * max_val / e).log10()).clamp(0.0, PSNR_CAP))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub data_range: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 8,
            data_range: 1.0,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }
}

/// Mean SSIM over all `window × window` positions of two row-major images
/// of `width` columns.
pub fn ssim(a: &[f64], b: &[f64], width: usize, params: &SsimParams) -> Result<f64> {
    check_len(a.len(), b.len(), "ssim image")?;
    if width == 0 || !a.len().is_multiple_of(width) {
        return Err(Error::shape(format!(
            "{} pixels do not form rows of {width}",
            a.len()
        )));
    }
    let height = a.len() / width;
    let w = params.window;
    if w == 0 || height < w || width < w {
        return Err(Error::invalid(format!(
            "{height}x{width} image is smaller than the {w}x{w} window"
        )));
    }
    let (c1, c2) = (params.c1(), params.c2());
    let n = (w * w) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for top in 0..=height - w {
        for left in 0..=width - w {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in top..top + w {
                for c in left..left + w {
                    let (x, y) = (a[r * width + c], b[r * width + c]);
                    sa += x;
                    sb += y;
                    saa += x * x;
                    sbb += y * y;
                    sab += x * y;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = (saa / n - ma * ma).max(0.0);
            let vb = (sbb / n - mb * mb).max(0.0);
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn check_points(points: &[Vec<f64>], min: usize) -> Result<usize> {
    if points.len() < min {
        return Err(Error::invalid(format!(
            "need at least {min} points, got {}",
            points.len()
        )));
    }
    let d = points[0].len();
    if d == 0 {
        return Err(Error::shape("zero-dimensional points"));
    }
    for p in points {
        check_len(d, p.len(), "point")?;
    }
    Ok(d)
}

/// Mean Euclidean distance over all unordered pairs.
pub fn pairwise_euclidean(points: &[Vec<f64>]) -> Result<f64> {
    check_points(points, 2)?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            total += squared_distance(&points[i], &points[j]).sqrt();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Silhouette {
    pub mean: f64,
    pub per_point: Vec<f64>,
    /// Some point had `a = b = 0`; its score was set to 0.
    pub degenerate: bool,
}

impl Silhouette {
    /// Mean score over the points carrying `label`.
    pub fn cluster_mean(&self, labels: &[usize], label: usize) -> Option<f64> {
        let vals: Vec<f64> = labels
            .iter()
            .zip(&self.per_point)
            .filter(|(l, _)| **l == label)
            .map(|(_, s)| *s)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<Silhouette> {
    check_points(points, 3)?;
    check_len(points.len(), labels.len(), "labels")?;
    let mut clusters: Vec<usize> = labels.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    if clusters.len() < 2 {
        return Err(Error::invalid("silhouette needs at least two clusters"));
    }
    let n = points.len();
    let dist: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| squared_distance(&points[i], &points[j]).sqrt())
                .collect()
        })
        .collect();
    let mut degenerate = false;
    let per_point: Vec<f64> = (0..n)
        .map(|i| {
            let mean_to = |label: usize| {
                let (sum, cnt) = (0..n)
                    .filter(|&j| j != i && labels[j] == label)
                    .fold((0.0, 0usize), |(s, c), j| (s + dist[i][j], c + 1));
                (cnt > 0).then(|| sum / cnt as f64)
            };
            let Some(a) = mean_to(labels[i]) else {
                return 0.0;
            };
            let b = clusters
                .iter()
                .filter(|&&l| l != labels[i])
                .filter_map(|&l| mean_to(l))
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m == 0.0 {
                degenerate = true;
                0.0
            } else {
                (b - a) / m
            }
        })
        .collect();
    Ok(Silhouette {
        mean: per_point.iter().sum::<f64>() / n as f64,
        per_point,
        degenerate,
    })
}

/// Sample covariance (divisor `n − 1`) of the points as a `d × d` matrix.
pub fn sample_covariance(points: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let d = check_points(points, 2)?;
    let n = points.len() as f64;
    let mean: Vec<f64> = (0..d)
        .map(|k| points.iter().map(|p| p[k]).sum::<f64>() / n)
        .collect();
    let mut cov = DMatrix::zeros(d, d);
    for p in points {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (p[i] - mean[i]) * (p[j] - mean[j]);
            }
        }
    }
    Ok(cov / (n - 1.0))
}

pub fn covariance_determinant(points: &[Vec<f64>]) -> Result<f64> {
    let det = sample_covariance(points)?.determinant();
    if det < 0.0 {
        if det >= -1e-12 {
            return Ok(0.0);
        }
        return Err(Error::Numeric {
            layer: 0,
            context: format!("covariance determinant {det:e} is negative"),
        });
    }
    Ok(det)
}

/// Dynamics used as the reference for transition error.
#[derive(Debug, Clone, Copy)]
pub enum Dynamics<'a> {
    Env(&'a EnvSpec),
    Model(&'a TransitionModel),
}

impl Dynamics<'_> {
    pub fn source(&self) -> &'static str {
        match self {
            Dynamics::Env(_) => "env",
            Dynamics::Model(_) => "model",
        }
    }

    pub fn predict(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        match self {
            Dynamics::Env(env) => expected_next_state(env, s, a),
            Dynamics::Model(m) => m.predict(s, a),
        }
    }
}

/// One `(s, a, s')` triple in encoded form.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTriple {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub s_next: Vec<f64>,
}

/// Mean over samples of `‖f(s, a) − s'‖² / state_dim`.
pub fn transition_error(samples: &[EncodedTriple], dynamics: Dynamics<'_>) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("transition error of no samples"));
    }
    let mut total = 0.0;
    for t in samples {
        let pred = dynamics.predict(&t.s, &t.a)?;
        check_len(pred.len(), t.s_next.len(), "next state")?;
        total += squared_distance(&pred, &t.s_next) / t.s_next.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// `‖∇θL(candidate) − packet.grad‖²` for a flat encoded candidate batch.
pub fn gme(
    packet: &GradientPacket,
    candidate: &[f64],
    snapshot: &NetSnapshot,
    setup: &TdSetup,
) -> Result<f64> {
    packet.check_snapshot(snapshot)?;
    let (_, g) = td_value_and_grad(snapshot, setup, candidate)?;
    Ok(squared_distance(&g, &packet.grad))
}

/// Named metric values for one (env, method, seed) cell.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub env: String,
    pub method: String,
    pub seed: u64,
    pub n_evaluated: usize,
    pub m_total: usize,
    pub values: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn new(env: impl Into<String>, method: impl Into<String>, seed: u64) -> Self {
        MetricsReport {
            env: env.into(),
            method: method.into(),
            seed,
            ..Default::default()
        }
    }

    pub fn set(&mut self, name: &str, value: f64) -> &mut Self {
        self.values.insert(name.to_string(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }

    /// Range checks: RA in [0,1], SS and SSIM in [-1,1], PSNR in [0, cap], the rest ≥ 0.
    pub fn validate(&self) -> Result<()> {
        for (k, &v) in &self.values {
            let ok = match k.as_str() {
                "ra" => (0.0..=1.0).contains(&v),
                "ss" | "ssim" => (-1.0..=1.0).contains(&v),
                "psnr" => (0.0..=PSNR_CAP).contains(&v),
                _ => v >= 0.0,
            };
            if !ok {
                return Err(Error::invalid(format!("metric {k} = {v} out of range")));
            }
        }
        Ok(())
    }

    /// Writes reports as CSV rows; metric columns are the sorted union of names.
    pub fn write_csv<W: Write>(reports: &[MetricsReport], out: W) -> Result<()> {
        let mut names: Vec<&String> = reports.iter().flat_map(|r| r.values.keys()).collect();
        names.sort();
        names.dedup();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["env", "method", "seed", "n_evaluated", "m_total"];
        header.extend(names.iter().map(|s| s.as_str()));
        w.write_record(&header)?;
        for r in reports {
            let mut row = vec![
                r.env.clone(),
                r.method.clone(),
                r.seed.to_string(),
                r.n_evaluated.to_string(),
                r.m_total.to_string(),
            ];
            row.extend(names.iter().map(|n| {
                r.values
                    .get(*n)
                    .map(|v| format!("{v:e}"))
                    .unwrap_or_default()
            }));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}
