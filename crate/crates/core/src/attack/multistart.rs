use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::objective::AttackProblem;
use super::rgia::{rgia_attack, AttackConfig, ReconstructionResult};
use crate::envs::{EnvSpec, PIXEL_SIDE};
use crate::error::{Error, Result};
use crate::frlcore::{mix, TransitionLayout};
use crate::metrics::{covariance_determinant, pairwise_euclidean, silhouette};

/// Low-dimensional coordinates of a reconstructed sample used for the
/// consistency metrics: expected (row, col) of the state and next-state
/// distributions on grids, raw states for point mass.
pub fn consistency_embedding(
    env: &EnvSpec,
    layout: &TransitionLayout,
    relaxed: &[f64],
) -> Vec<f64> {
    let n = relaxed.len() / layout.sample_width();
    let mut out = Vec::new();
    for i in 0..n {
        let v = layout.sample(relaxed, i);
        for s in [v.s, v.s_next] {
            match env {
                EnvSpec::Gridlake(g) => out.extend(grid_centroid(s, g.cols())),
                EnvSpec::Pixelgrid(_) => out.extend(grid_centroid(s, PIXEL_SIDE)),
                EnvSpec::Pointmass(_) => out.extend_from_slice(s),
            }
        }
    }
    out
}

fn grid_centroid(weights: &[f64], cols: usize) -> [f64; 2] {
    let total: f64 = weights.iter().sum();
    if total.abs() < 1e-300 {
        return [0.0, 0.0];
    }
    let (mut r, mut c) = (0.0, 0.0);
    for (k, w) in weights.iter().enumerate() {
        r += w * (k / cols) as f64;
        c += w * (k % cols) as f64;
    }
    [r / total, c / total]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartResult {
    pub packet_id: usize,
    pub start: usize,
    pub result: ReconstructionResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRow {
    pub method: String,
    pub packet_id: usize,
    pub ed: f64,
    /// Mean silhouette of this packet's reconstructions among all packets';
    /// absent with a single packet.
    pub ss: Option<f64>,
    pub cd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub rows: Vec<ConsistencyRow>,
    pub starts: Vec<StartResult>,
}

impl ConsistencyReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_consistency_csv(&self.rows, out)
    }
}

pub fn write_consistency_csv<W: Write>(rows: &[ConsistencyRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "packet_id", "ED", "SS", "CD"])?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.packet_id.to_string(),
            format!("{:e}", r.ed),
            r.ss.map(|v| format!("{v:e}")).unwrap_or_default(),
            format!("{:e}", r.cd),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Seed of start `start` on packet `packet_id`.
pub fn start_seed(seed: u64, packet_id: usize, start: usize) -> u64 {
    mix(seed, packet_id as u64 + 1, start as u64)
}

/// Runs `k` independently seeded inversions of every problem and measures how
/// tightly each packet's reconstructions cluster.
pub fn multistart_analysis(
    problems: &[AttackProblem<'_>],
    k: usize,
    config: &AttackConfig,
    method: &str,
    seed: u64,
) -> Result<ConsistencyReport> {
    let seeds: Vec<Vec<u64>> = (0..problems.len())
        .map(|p| (0..k).map(|s| start_seed(seed, p, s)).collect())
        .collect();
    multistart_with_seeds(problems, &seeds, config, method)
}

/// As [`multistart_analysis`] with explicit per-packet start seeds.
pub fn multistart_with_seeds(
    problems: &[AttackProblem<'_>],
    seeds: &[Vec<u64>],
    config: &AttackConfig,
    method: &str,
) -> Result<ConsistencyReport> {
    if problems.is_empty() || problems.len() != seeds.len() {
        return Err(Error::invalid("one seed list per packet is required"));
    }
    if seeds.iter().any(|s| s.len() < 2) {
        return Err(Error::invalid("multi-start analysis needs k >= 2"));
    }
    let jobs: Vec<(usize, usize, u64)> = seeds
        .iter()
        .enumerate()
        .flat_map(|(p, ss)| ss.iter().enumerate().map(move |(s, &seed)| (p, s, seed)))
        .collect();
    let starts: Vec<StartResult> = jobs
        .par_iter()
        .map(|&(p, s, seed)| {
            rgia_attack(&problems[p], config, seed).map(|result| StartResult {
                packet_id: p,
                start: s,
                result,
            })
        })
        .collect::<Result<_>>()?;

    let mut points = Vec::with_capacity(starts.len());
    let mut labels = Vec::with_capacity(starts.len());
    for st in &starts {
        let prob = &problems[st.packet_id];
        points.push(consistency_embedding(
            prob.env,
            &prob.layout(),
            &st.result.relaxed,
        ));
        labels.push(st.packet_id);
    }
    let sil = if problems.len() >= 2 {
        Some(silhouette(&points, &labels)?)
    } else {
        None
    };
    let rows = (0..problems.len())
        .map(|p| {
            let own: Vec<Vec<f64>> = points
                .iter()
                .zip(&labels)
                .filter(|(_, l)| **l == p)
                .map(|(x, _)| x.clone())
                .collect();
            Ok(ConsistencyRow {
                method: method.to_string(),
                packet_id: p,
                ed: pairwise_euclidean(&own)?,
                ss: sil.as_ref().and_then(|s| s.cluster_mean(&labels, p)),
                cd: covariance_determinant(&own)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ConsistencyReport { rows, starts })
}
