use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Geomodel, GridSpec};
use crate::error::{Error, Result};

/// Truncated PCA of a realization ensemble: `m = U_l diag(s) xi + mean`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    pub grid: GridSpec,
    pub mean: Vec<f64>,
    /// Column-major n_cells x l.
    pub basis: Vec<f64>,
    pub singulars: Vec<f64>,
    pub l: usize,
    pub energy_fraction: f64,
    /// Number of models the basis was built from.
    pub n_models: usize,
}

impl PcaBasis {
    pub fn n_cells(&self) -> usize {
        self.mean.len()
    }

    pub fn column(&self, i: usize) -> &[f64] {
        let n = self.n_cells();
        &self.basis[i * n..(i + 1) * n]
    }

    pub fn basis_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.n_cells(), self.l, &self.basis)
    }

    /// Keeps the leading `l` components (no-op if `l >= self.l`).
    pub fn truncate(&self, l: usize) -> Result<PcaBasis> {
        if l == 0 {
            return Err(Error::invalid("PCA truncation needs l >= 1"));
        }
        if l >= self.l {
            return Ok(self.clone());
        }
        let kept: f64 = self.singulars[..l].iter().map(|s| s * s).sum();
        let all: f64 = self.singulars.iter().map(|s| s * s).sum();
        Ok(PcaBasis {
            basis: self.basis[..l * self.n_cells()].to_vec(),
            singulars: self.singulars[..l].to_vec(),
            l,
            energy_fraction: self.energy_fraction * kept / all,
            ..self.clone()
        })
    }
}

/// Builds the PCA representation retaining at least `energy_target` of the
/// squared-singular-value energy of the centered, `1/sqrt(n-1)`-scaled
/// ensemble matrix.
pub fn build_pca(models: &[Geomodel], energy_target: f64) -> Result<PcaBasis> {
    if models.len() < 2 {
        return Err(Error::invalid("PCA needs at least two models"));
    }
    if !(energy_target > 0.0 && energy_target <= 1.0) {
        return Err(Error::invalid(format!(
            "energy target must lie in (0, 1], got {energy_target}"
        )));
    }
    let grid = models[0].grid;
    if models.iter().any(|m| m.grid != grid) {
        return Err(Error::invalid("all PCA models must share one grid"));
    }
    let n = grid.n_cells();
    let n_rp = models.len();
    let mut mean = vec![0.0; n];
    for m in models {
        for (acc, v) in mean.iter_mut().zip(&m.logk) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n_rp as f64);

    let scale = 1.0 / ((n_rp - 1) as f64).sqrt();
    let y = DMatrix::from_fn(n, n_rp, |c, r| (models[r].logk[c] - mean[c]) * scale);
    let svd = y.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");

    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    // Stable sort keeps the earlier index on ties.
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .expect("finite singular values")
    });
    let sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let total: f64 = sv.iter().map(|s| s * s).sum();
    if total <= 0.0 {
        return Err(Error::RankDeficient {
            achieved: 0.0,
            target: energy_target,
            rank: 0,
        });
    }
    let tol = sv[0] * (n.max(n_rp) as f64) * f64::EPSILON;
    let rank = sv.iter().take_while(|&&s| s > tol).count();

    let mut cum = 0.0;
    let mut l = 0;
    let mut fraction = 0.0;
    for (i, s) in sv.iter().take(rank).enumerate() {
        cum += s * s;
        fraction = cum / total;
        if fraction >= energy_target - 1e-12 {
            l = i + 1;
            break;
        }
    }
    if l == 0 {
        return Err(Error::RankDeficient {
            achieved: fraction,
            target: energy_target,
            rank,
        });
    }

    let mut basis = Vec::with_capacity(n * l);
    for &col in order.iter().take(l) {
        basis.extend(u.column(col).iter().copied());
    }
    Ok(PcaBasis {
        grid,
        mean,
        basis,
        singulars: sv[..l].to_vec(),
        l,
        energy_fraction: fraction.min(1.0),
        n_models: n_rp,
    })
}

/// `m = U_l diag(s) xi + mean`.
pub fn pca_to_model(basis: &PcaBasis, xi: &[f64]) -> Result<Geomodel> {
    if xi.len() != basis.l {
        return Err(Error::shape("pca_to_model", basis.l, xi.len()));
    }
    let n = basis.n_cells();
    let mut logk = basis.mean.clone();
    for (i, (&x, &s)) in xi.iter().zip(&basis.singulars).enumerate() {
        let w = x * s;
        if w == 0.0 {
            continue;
        }
        let col = &basis.basis[i * n..(i + 1) * n];
        for (v, b) in logk.iter_mut().zip(col) {
            *v += w * b;
        }
    }
    Geomodel::new(basis.grid, logk)
}

/// Latent coordinates of a model: `diag(s)^-1 U_l^T (m - mean)`.
pub fn project(basis: &PcaBasis, model: &Geomodel) -> Result<Vec<f64>> {
    if model.grid != basis.grid {
        return Err(Error::invalid("model grid differs from PCA grid"));
    }
    let centered = DVector::from_iterator(
        basis.n_cells(),
        model.logk.iter().zip(&basis.mean).map(|(m, mu)| m - mu),
    );
    let coords = basis.basis_matrix().transpose() * centered;
    Ok(coords.iter().zip(&basis.singulars).map(|(c, s)| c / s).collect())
}
