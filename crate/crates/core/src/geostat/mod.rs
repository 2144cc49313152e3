//! Multi-Gaussian log-permeability realizations and their PCA parameterization.
//!
//! Realizations are drawn exactly from the spherical-variogram covariance by a
//! dense Cholesky factorization, then conditioned to hard data with simple
//! kriging of the residual at the data locations. This is only viable at desk
//! scale (a few thousand cells), which is the regime this crate targets.

mod pca;

pub use pca::{build_pca, pca_to_model, project, PcaBasis};

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Largest grid the dense covariance sampler accepts.
pub const MAX_DENSE_CELLS: usize = 6000;

/// Relative nugget added to the covariance diagonal before factorization.
pub const NUGGET_FRACTION: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    /// Cell sizes in metres.
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, nz: usize, dx: f64, dy: f64, dz: f64) -> Result<Self> {
        let grid = GridSpec { nx, ny, nz, dx, dy, dz };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 || self.nz == 0 {
            return Err(Error::invalid(format!(
                "grid counts must be >= 1, got {}x{}x{}",
                self.nx, self.ny, self.nz
            )));
        }
        if !(self.dx > 0.0 && self.dy > 0.0 && self.dz > 0.0) {
            return Err(Error::invalid("grid cell sizes must be > 0"));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    /// Linear index, x fastest.
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.nx * (j + self.ny * k)
    }

    #[inline]
    pub fn ijk(&self, cell: usize) -> (usize, usize, usize) {
        let i = cell % self.nx;
        let j = (cell / self.nx) % self.ny;
        let k = cell / (self.nx * self.ny);
        (i, j, k)
    }

    pub fn center(&self, cell: usize) -> [f64; 3] {
        let (i, j, k) = self.ijk(cell);
        [
            (i as f64 + 0.5) * self.dx,
            (j as f64 + 0.5) * self.dy,
            (k as f64 + 0.5) * self.dz,
        ]
    }

    pub fn cell_volume(&self) -> f64 {
        self.dx * self.dy * self.dz
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariogramKind {
    #[default]
    Spherical,
}

/// Spherical variogram with geometric anisotropy.
///
/// `r_max` points `azimuth` degrees clockwise from the y-axis in the
/// horizontal plane, `r_mid` is the horizontal direction normal to it and
/// `r_min` is vertical.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariogramSpec {
    pub sill: f64,
    pub r_max: f64,
    pub r_mid: f64,
    pub r_min: f64,
    pub azimuth: f64,
    pub mean: f64,
    #[serde(default)]
    pub kind: VariogramKind,
}

impl VariogramSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sill > 0.0) {
            return Err(Error::invalid("variogram sill must be > 0"));
        }
        if !(self.r_max >= self.r_mid && self.r_mid >= self.r_min && self.r_min > 0.0) {
            return Err(Error::invalid(format!(
                "variogram ranges must satisfy r_max >= r_mid >= r_min > 0, got {} / {} / {}",
                self.r_max, self.r_mid, self.r_min
            )));
        }
        if !self.mean.is_finite() || !self.azimuth.is_finite() {
            return Err(Error::invalid("variogram mean and azimuth must be finite"));
        }
        Ok(())
    }

    /// Anisotropy-normalized length of a lag vector.
    pub fn normalized_lag(&self, lag: [f64; 3]) -> f64 {
        let az = self.azimuth.to_radians();
        let (s, c) = az.sin_cos();
        let along_max = lag[0] * s + lag[1] * c;
        let along_mid = lag[0] * c - lag[1] * s;
        let a = along_max / self.r_max;
        let b = along_mid / self.r_mid;
        let v = lag[2] / self.r_min;
        (a * a + b * b + v * v).sqrt()
    }
}

fn spherical(h: f64) -> f64 {
    if h >= 1.0 {
        1.0
    } else {
        1.5 * h - 0.5 * h * h * h
    }
}

/// Covariance of log-permeability at a given lag (m).
pub fn spherical_covariance(lag: [f64; 3], v: &VariogramSpec) -> f64 {
    v.sill * (1.0 - spherical(v.normalized_lag(lag)))
}

/// Exactly known log-permeability values at a set of cells.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HardData {
    pub points: Vec<(usize, f64)>,
}

impl HardData {
    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        let mut seen = vec![false; grid.n_cells()];
        for &(cell, value) in &self.points {
            if cell >= grid.n_cells() {
                return Err(Error::invalid(format!("hard datum cell {cell} outside grid")));
            }
            if std::mem::replace(&mut seen[cell], true) {
                return Err(Error::invalid(format!("duplicate hard datum at cell {cell}")));
            }
            if !value.is_finite() {
                return Err(Error::invalid(format!("hard datum at cell {cell} is not finite")));
            }
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.0).collect()
    }
}

/// Log-permeability (ln md) on a structured grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Geomodel {
    pub grid: GridSpec,
    pub logk: Vec<f64>,
}

impl Geomodel {
    pub fn new(grid: GridSpec, logk: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if logk.len() != grid.n_cells() {
            return Err(Error::shape("Geomodel", grid.n_cells(), logk.len()));
        }
        if let Some(c) = logk.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("log-permeability at cell {c}")));
        }
        Ok(Geomodel { grid, logk })
    }

    pub fn homogeneous(grid: GridSpec, logk: f64) -> Self {
        Geomodel {
            grid,
            logk: vec![logk; grid.n_cells()],
        }
    }

    /// Permeability in md.
    pub fn permeability_md(&self) -> Vec<f64> {
        self.logk.iter().map(|v| v.exp()).collect()
    }

    pub fn save_binary(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut buf = Vec::with_capacity(36 + 8 * self.logk.len());
        for n in [self.grid.nx, self.grid.ny, self.grid.nz] {
            buf.extend_from_slice(&(n as u32).to_le_bytes());
        }
        for d in [self.grid.dx, self.grid.dy, self.grid.dz] {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.logk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_binary(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 36 {
            return Err(Error::format(path, "truncated geomodel header"));
        }
        let u = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let f = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let grid = GridSpec::new(u(0), u(4), u(8), f(12), f(20), f(28))?;
        let n = grid.n_cells();
        if bytes.len() != 36 + 8 * n {
            return Err(Error::format(
                path,
                format!("expected {} bytes of cell data, found {}", 8 * n, bytes.len() - 36),
            ));
        }
        let logk = (0..n).map(|c| f(36 + 8 * c)).collect();
        Geomodel::new(grid, logk)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut out = String::from("cell,i,j,k,logk\n");
        for (c, v) in self.logk.iter().enumerate() {
            let (i, j, k) = self.grid.ijk(c);
            out.push_str(&format!("{c},{i},{j},{k},{v:.12e}\n"));
        }
        w.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Dense covariance over `cells` (nugget on the diagonal).
pub fn covariance_matrix(grid: &GridSpec, v: &VariogramSpec, cells: &[usize]) -> DMatrix<f64> {
    let centers: Vec<[f64; 3]> = cells.iter().map(|&c| grid.center(c)).collect();
    let n = cells.len();
    let mut cov = DMatrix::zeros(n, n);
    for b in 0..n {
        for a in b..n {
            let lag = [
                centers[a][0] - centers[b][0],
                centers[a][1] - centers[b][1],
                centers[a][2] - centers[b][2],
            ];
            let c = spherical_covariance(lag, v);
            cov[(a, b)] = c;
            cov[(b, a)] = c;
        }
        cov[(b, b)] += NUGGET_FRACTION * v.sill;
    }
    cov
}

/// Exact conditional Gaussian sampler for one grid / variogram / hard-data set.
pub struct GaussianSampler {
    grid: GridSpec,
    mean: f64,
    lower: DMatrix<f64>,
    hard: HardData,
    /// Simple-kriging weights, n_cells x n_hard.
    kriging: DMatrix<f64>,
}

impl GaussianSampler {
    pub fn new(grid: GridSpec, v: VariogramSpec, hard: HardData) -> Result<Self> {
        grid.validate()?;
        v.validate()?;
        hard.validate(&grid)?;
        let n = grid.n_cells();
        if n > MAX_DENSE_CELLS {
            return Err(Error::invalid(format!(
                "dense covariance sampling supports at most {MAX_DENSE_CELLS} cells, grid has {n}"
            )));
        }
        let all: Vec<usize> = (0..n).collect();
        let cov = covariance_matrix(&grid, &v, &all);
        let hard_cells = hard.cells();
        let kriging = if hard_cells.is_empty() {
            DMatrix::zeros(n, 0)
        } else {
            let c_ww = DMatrix::from_fn(hard_cells.len(), hard_cells.len(), |a, b| {
                cov[(hard_cells[a], hard_cells[b])]
            });
            let c_aw = DMatrix::from_fn(n, hard_cells.len(), |a, b| cov[(a, hard_cells[b])]);
            let chol = c_ww
                .cholesky()
                .ok_or_else(|| Error::Factorization("hard-data covariance".into()))?;
            // K = C_aw C_ww^-1, i.e. K^T = C_ww^-1 C_wa.
            chol.solve(&c_aw.transpose()).transpose()
        };
        let lower = cov
            .cholesky()
            .ok_or_else(|| Error::Factorization(format!("{n}x{n} cell covariance")))?
            .unpack();
        Ok(GaussianSampler {
            grid,
            mean: v.mean,
            lower,
            hard,
            kriging,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    /// Unconditioned draw for stream `index`.
    fn unconditioned(&self, seed: u64, index: usize) -> DVector<f64> {
        let n = self.grid.n_cells();
        let mut rng = rng::stream(seed, &[rng::tag::REALIZATION, index as u64]);
        let z = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(&mut rng)));
        let mut m = &self.lower * z;
        m.add_scalar_mut(self.mean);
        m
    }

    pub fn realization(&self, seed: u64, index: usize) -> Geomodel {
        let mut m = self.unconditioned(seed, index);
        if !self.hard.points.is_empty() {
            let residual =
                DVector::from_iterator(self.hard.points.len(), self.hard.points.iter().map(|&(c, d)| d - m[c]));
            m += &self.kriging * residual;
            for &(c, d) in &self.hard.points {
                m[c] = d;
            }
        }
        Geomodel {
            grid: self.grid,
            logk: m.as_slice().to_vec(),
        }
    }

    /// `count` realizations; realization `r` depends only on (seed, r).
    pub fn sample(&self, count: usize, seed: u64) -> Vec<Geomodel> {
        (0..count).into_par_iter().map(|r| self.realization(seed, r)).collect()
    }
}

/// Conditioned multi-Gaussian realizations, deterministic per seed.
pub fn sample_realizations(
    grid: &GridSpec,
    v: &VariogramSpec,
    hd: &HardData,
    count: usize,
    seed: u64,
) -> Result<Vec<Geomodel>> {
    Ok(GaussianSampler::new(*grid, *v, hd.clone())?.sample(count, seed))
}

/// Draws hard-data values at `cells` from the unconditional law, so that
/// synthetic truths and priors share a consistent well log.
pub fn draw_hard_data(grid: &GridSpec, v: &VariogramSpec, cells: &[usize], seed: u64) -> Result<HardData> {
    v.validate()?;
    if cells.is_empty() {
        return Ok(HardData::default());
    }
    let cov = covariance_matrix(grid, v, cells);
    let lower = cov
        .cholesky()
        .ok_or_else(|| Error::Factorization("hard-data covariance".into()))?
        .unpack();
    let mut rng = rng::stream(seed, &[rng::tag::HARD_DATA]);
    let z = DVector::from_iterator(cells.len(), (0..cells.len()).map(|_| StandardNormal.sample(&mut rng)));
    let values = lower * z;
    let hd = HardData {
        points: cells
            .iter()
            .zip(values.iter())
            .map(|(&c, &x)| (c, v.mean + x))
            .collect(),
    };
    hd.validate(grid)?;
    Ok(hd)
}
