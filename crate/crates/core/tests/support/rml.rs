use clrm_core::hm::{rml_ensemble, LmConfig, ObservationSet};
use clrm_core::rng;
use clrm_core::Result;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

pub struct Linear {
    pub g: DMatrix<f64>,
}

impl Linear {
    pub fn new(nd: usize, l: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[99]);
        Linear {
            g: DMatrix::from_fn(nd, l, |_, _| r.sample::<f64, _>(StandardNormal)),
        }
    }

    pub fn forward(&self, xi: &[f64]) -> Result<Vec<f64>> {
        Ok((&self.g * DVector::from_column_slice(xi)).iter().copied().collect())
    }

    /// Posterior mean map and covariance for prior N(0, I) and diagonal C_d.
    pub fn posterior(&self, sd: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        let l = self.g.ncols();
        let cinv = DMatrix::from_diagonal(&DVector::from_iterator(sd.len(), sd.iter().map(|s| 1.0 / (s * s))));
        let gtc = self.g.transpose() * cinv;
        let cov = (&gtc * &self.g + DMatrix::identity(l, l)).try_inverse().unwrap();
        (&cov * gtc, cov)
    }
}

/// Worst normalized mean error and worst relative variance error of a
/// 200-sample RML ensemble on a 10-dimensional linear problem.
pub fn linear_gaussian_errors(seed: u64, moment_match: bool) -> (f64, f64) {
    let (nd, l, n) = (15, 10, 200);
    let lin = Linear::new(nd, l, seed);
    let mut r = rng::stream(seed, &[7]);
    let xi_true: Vec<f64> = (0..l).map(|_| r.sample(StandardNormal)).collect();
    let sd = vec![1.0; nd];
    let d_true = lin.forward(&xi_true).unwrap();
    let obs = ObservationSet {
        times: vec![],
        labels: vec![String::new(); nd],
        values: d_true
            .iter()
            .zip(&sd)
            .map(|(d, s)| d + s * r.sample::<f64, _>(StandardNormal))
            .collect(),
        sd: sd.clone(),
    };
    let runs = rml_ensemble(
        &|x: &[f64]| lin.forward(x),
        l,
        &obs,
        n,
        &LmConfig::default(),
        seed,
        moment_match,
    )
    .unwrap();
    let (m, cov) = lin.posterior(&sd);
    let mean = m * DVector::from_column_slice(&obs.values);
    let mut worst_mean: f64 = 0.0;
    let mut worst_var: f64 = 0.0;
    for k in 0..l {
        let xs: Vec<f64> = runs.iter().map(|run| run.outcome.xi[k]).collect();
        let mu = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1) as f64;
        worst_mean = worst_mean.max((mu - mean[k]).abs() / cov[(k, k)].sqrt());
        worst_var = worst_var.max((var / cov[(k, k)] - 1.0).abs());
    }
    (worst_mean, worst_var)
}
