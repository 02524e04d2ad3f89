use nalgebra::SymmetricEigen;

use crate::error::{Error, Result};
use crate::metrics::sample_covariance;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    pub mean: Vec<f64>,
    /// Unit principal axes, largest variance first.
    pub components: Vec<Vec<f64>>,
    pub projected: Vec<Vec<f64>>,
    /// Share of total variance per component; zeros when degenerate.
    pub explained_variance: Vec<f64>,
    /// All points coincide.
    pub degenerate: bool,
}

impl PcaProjection {
    /// Maps projected points back into the original space.
    pub fn reconstruct(&self) -> Vec<Vec<f64>> {
        self.projected
            .iter()
            .map(|p| {
                let mut x = self.mean.clone();
                for (c, w) in self.components.iter().zip(p) {
                    for (xi, ci) in x.iter_mut().zip(c) {
                        *xi += w * ci;
                    }
                }
                x
            })
            .collect()
    }
}

/// Projects `points` onto their top `dims` principal components. Each axis is
/// signed so that its first non-negligible loading is positive.
pub fn pca_project(points: &[Vec<f64>], dims: usize) -> Result<PcaProjection> {
    if points.len() < 3 {
        return Err(Error::invalid("PCA needs at least 3 points"));
    }
    let d = points[0].len();
    if dims == 0 || dims > d {
        return Err(Error::invalid(format!(
            "cannot project {d}-dimensional points onto {dims} axes"
        )));
    }
    let cov = sample_covariance(points)?;
    let n = points.len() as f64;
    let mean: Vec<f64> = (0..d)
        .map(|k| points.iter().map(|p| p[k]).sum::<f64>() / n)
        .collect();

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let degenerate = total <= 1e-300;

    let mut components = Vec::with_capacity(dims);
    let mut explained = Vec::with_capacity(dims);
    for &k in order.iter().take(dims) {
        let mut axis: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        if let Some(first) = axis.iter().find(|v| v.abs() > 1e-12) {
            if *first < 0.0 {
                axis.iter_mut().for_each(|v| *v = -*v);
            }
        }
        components.push(axis);
        explained.push(if degenerate {
            0.0
        } else {
            eig.eigenvalues[k].max(0.0) / total
        });
    }
    let projected = points
        .iter()
        .map(|p| {
            components
                .iter()
                .map(|c| {
                    if degenerate {
                        0.0
                    } else {
                        c.iter()
                            .zip(p)
                            .zip(&mean)
                            .map(|((ci, x), m)| ci * (x - m))
                            .sum()
                    }
                })
                .collect()
        })
        .collect();
    Ok(PcaProjection {
        mean,
        components,
        projected,
        explained_variance: explained,
        degenerate,
    })
}
