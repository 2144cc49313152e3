//! Randomized maximum likelihood on the PCA latent space.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ResultExt};
use crate::geostat::{pca_to_model, Geomodel, PcaBasis};
use crate::resim::{BhpSchedule, FluidSpec, Numerics, RateSeries, Simulator, WellKind, WellSpec};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Standard deviation as a fraction of the datum.
    pub relative_sd: f64,
    /// Lower bound on the standard deviation, m³/day.
    pub sd_floor: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            relative_sd: 0.02,
            sd_floor: 0.5,
        }
    }
}

impl NoiseSpec {
    pub fn sd(&self, value: f64) -> f64 {
        (self.relative_sd * value.abs()).max(self.sd_floor)
    }
}

/// Observed data with a diagonal error covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub times: Vec<f64>,
    /// `<well>:<phase>@<day>` per datum.
    pub labels: Vec<String>,
    pub values: Vec<f64>,
    pub sd: Vec<f64>,
}

impl ObservationSet {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Observation times `interval, 2·interval, ...` up to and including `end`.
pub fn observation_times(end: f64, interval: f64) -> Vec<f64> {
    let n = ((end + 1e-9) / interval).floor() as usize;
    (1..=n).map(|k| k as f64 * interval).collect()
}

/// Data vector ordered by well (declaration order), then phase
/// (injected water; produced oil, produced water), then time.
pub fn extract_data(r: &RateSeries, wells: &[WellSpec], times: &[f64]) -> Result<(Vec<f64>, Vec<String>)> {
    let idx: Result<Vec<usize>> = times
        .iter()
        .map(|&t| {
            r.report_times
                .iter()
                .position(|&x| (x - t).abs() < 1e-6)
                .ok_or_else(|| Error::invalid(format!("no report at day {t}")))
        })
        .collect();
    let idx = idx?;
    let (mut values, mut labels) = (Vec::new(), Vec::new());
    let mut push = |name: &str, phase: &str, series: &[f64]| {
        for (&k, &t) in idx.iter().zip(times) {
            values.push(series[k]);
            labels.push(format!("{name}:{phase}@{t}"));
        }
    };
    for w in wells {
        match w.kind {
            WellKind::Injector => {
                let i = r
                    .injector_names
                    .iter()
                    .position(|n| *n == w.name)
                    .ok_or_else(|| Error::invalid(format!("well {} not in rate series", w.name)))?;
                push(&w.name, "water_inj", &r.inj_water[i]);
            }
            WellKind::Producer => {
                let p = r
                    .producer_names
                    .iter()
                    .position(|n| *n == w.name)
                    .ok_or_else(|| Error::invalid(format!("well {} not in rate series", w.name)))?;
                push(&w.name, "oil_prod", &r.prod_oil[p]);
                push(&w.name, "water_prod", &r.prod_water[p]);
            }
        }
    }
    Ok((values, labels))
}

/// Adds Gaussian noise with `sd = max(relative_sd·|d|, floor)`, scaled by `noise_scale`.
pub fn perturb_observations(
    d_true: &[f64],
    labels: Vec<String>,
    times: Vec<f64>,
    noise: &NoiseSpec,
    noise_scale: f64,
    seed: u64,
) -> ObservationSet {
    let mut rng = rng::stream(seed, &[rng::tag::MEASUREMENT]);
    let sd: Vec<f64> = d_true.iter().map(|&d| noise.sd(d)).collect();
    let values = d_true
        .iter()
        .zip(&sd)
        .map(|(&d, &s)| {
            let z: f64 = rng.sample(StandardNormal);
            d + noise_scale * s * z
        })
        .collect();
    ObservationSet {
        times,
        labels,
        values,
        sd,
    }
}

/// Weighted data mismatch `(d - d*)ᵀ C_d⁻¹ (d - d*)`.
pub fn data_mismatch(d_sim: &[f64], d_star: &[f64], sd: &[f64]) -> f64 {
    d_sim
        .iter()
        .zip(d_star)
        .zip(sd)
        .map(|((a, b), s)| ((a - b) / s).powi(2))
        .sum()
}

/// RML objective: data mismatch plus `|ξ - ξ*|²`.
pub fn rml_objective(d_sim: &[f64], d_star: &[f64], sd: &[f64], xi: &[f64], xi_star: &[f64]) -> f64 {
    data_mismatch(d_sim, d_star, sd) + xi.iter().zip(xi_star).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub max_iterations: usize,
    /// Forward-difference step per latent component.
    pub fd_step: f64,
    pub lambda_init: f64,
    pub lambda_decrease: f64,
    pub lambda_increase: f64,
    /// Consecutive rejected steps before giving up on an iteration.
    pub max_rejections: usize,
    /// Stop once an accepted step reduces the objective by less than this fraction.
    pub rel_tol: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            max_iterations: 10,
            fd_step: 1e-4,
            lambda_init: 1e-3,
            lambda_decrease: 0.3,
            lambda_increase: 10.0,
            max_rejections: 8,
            rel_tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmlOutcome {
    pub xi: Vec<f64>,
    /// Objective after every accepted step, starting at ξ*.
    pub objective_history: Vec<f64>,
    pub mismatch_initial: f64,
    pub mismatch_final: f64,
    pub iterations: usize,
    pub simulations: usize,
    /// Set when an iteration found no descent direction after full damping escalation.
    pub degraded: bool,
}

/// Levenberg-Marquardt on the stacked residual `[C_d^{-1/2}(d - d*); ξ - ξ*]`.
pub fn rml_sample<F>(forward: &F, xi_star: &[f64], d_star: &[f64], sd: &[f64], cfg: &LmConfig) -> Result<RmlOutcome>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    let l = xi_star.len();
    let nd = d_star.len();
    if sd.len() != nd || sd.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::invalid("observation standard deviations must be positive"));
    }
    let check = |d: &Vec<f64>| -> Result<()> {
        if d.len() != nd {
            return Err(Error::shape("forward output", nd, d.len()));
        }
        if d.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("forward model output".into()));
        }
        Ok(())
    };
    let mut xi = xi_star.to_vec();
    let mut d = forward(&xi)?;
    check(&d)?;
    let mut sims = 1;
    let mut f = rml_objective(&d, d_star, sd, &xi, xi_star);
    let mismatch_initial = data_mismatch(&d, d_star, sd);
    let mut history = vec![f];
    let mut lambda = cfg.lambda_init;
    let mut degraded = false;
    let mut iterations = 0;

    while iterations < cfg.max_iterations {
        iterations += 1;
        let columns: Result<Vec<Vec<f64>>> = (0..l)
            .into_par_iter()
            .map(|k| {
                let mut x = xi.clone();
                x[k] += cfg.fd_step;
                let dk = forward(&x)?;
                check(&dk)?;
                Ok(dk
                    .iter()
                    .zip(&d)
                    .zip(sd)
                    .map(|((a, b), s)| (a - b) / (cfg.fd_step * s))
                    .collect())
            })
            .collect();
        let columns = columns?;
        sims += l;
        let jd = DMatrix::from_fn(nd, l, |i, k| columns[k][i]);
        let rd = DVector::from_iterator(nd, d.iter().zip(d_star).zip(sd).map(|((a, b), s)| (a - b) / s));
        let rx = DVector::from_iterator(l, xi.iter().zip(xi_star).map(|(a, b)| a - b));
        let jtj = jd.transpose() * &jd + DMatrix::identity(l, l);
        let g = jd.transpose() * rd + rx;

        let mut accepted = None;
        for _ in 0..=cfg.max_rejections {
            let a = &jtj + DMatrix::identity(l, l) * lambda;
            let delta = a
                .cholesky()
                .ok_or_else(|| Error::Factorization("Levenberg-Marquardt normal equations".into()))?
                .solve(&(-&g));
            let trial: Vec<f64> = xi.iter().zip(delta.iter()).map(|(a, b)| a + b).collect();
            let dt = forward(&trial)?;
            check(&dt)?;
            sims += 1;
            let ft = rml_objective(&dt, d_star, sd, &trial, xi_star);
            if ft < f {
                lambda *= cfg.lambda_decrease;
                accepted = Some((trial, dt, ft));
                break;
            }
            lambda *= cfg.lambda_increase;
        }
        let Some((trial, dt, ft)) = accepted else {
            degraded = history.len() == 1;
            break;
        };
        let rel = (f - ft) / f.max(f64::MIN_POSITIVE);
        xi = trial;
        d = dt;
        f = ft;
        history.push(f);
        if rel < cfg.rel_tol {
            break;
        }
    }
    Ok(RmlOutcome {
        mismatch_final: data_mismatch(&d, d_star, sd),
        xi,
        objective_history: history,
        mismatch_initial,
        iterations,
        simulations: sims,
        degraded,
    })
}

/// Independent prior latent draws and perturbed data for each RML run.
pub fn rml_draws(
    l: usize,
    obs: &ObservationSet,
    n_runs: usize,
    seed: u64,
    moment_match: bool,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let nd = obs.len();
    let mut z: Vec<Vec<f64>> = (0..n_runs)
        .map(|i| {
            let mut r0 = rng::stream(seed, &[rng::tag::RML, i as u64, 0]);
            let mut r1 = rng::stream(seed, &[rng::tag::RML, i as u64, 1]);
            (0..l)
                .map(|_| r0.sample::<f64, _>(StandardNormal))
                .chain((0..nd).map(|_| r1.sample::<f64, _>(StandardNormal)))
                .collect()
        })
        .collect();
    if moment_match {
        whiten(&mut z)?;
    }
    Ok(z.into_iter()
        .map(|v| {
            let xi = v[..l].to_vec();
            let d = v[l..]
                .iter()
                .zip(&obs.values)
                .zip(&obs.sd)
                .map(|((e, d), s)| d + s * e)
                .collect();
            (xi, d)
        })
        .collect())
}

/// Affine map making the sample mean exactly zero and the sample covariance
/// exactly the identity.
fn whiten(z: &mut [Vec<f64>]) -> Result<()> {
    let n = z.len();
    let dim = z.first().map_or(0, |v| v.len());
    if n <= dim {
        return Err(Error::invalid(format!(
            "moment matching needs more than {dim} draws, got {n}"
        )));
    }
    let mut m = DMatrix::from_fn(n, dim, |i, k| z[i][k]);
    for k in 0..dim {
        let mean = m.column(k).mean();
        m.column_mut(k).add_scalar_mut(-mean);
    }
    let cov = m.transpose() * &m / (n - 1) as f64;
    let lower = cov
        .cholesky()
        .ok_or_else(|| Error::Factorization("sample covariance".into()))?
        .l();
    let inv = lower
        .solve_lower_triangular(&DMatrix::identity(dim, dim))
        .ok_or_else(|| Error::Factorization("sample covariance".into()))?;
    let w = m * inv.transpose();
    for (i, row) in z.iter_mut().enumerate() {
        for (k, v) in row.iter_mut().enumerate() {
            *v = w[(i, k)];
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmlRun {
    pub index: usize,
    pub xi_star: Vec<f64>,
    pub outcome: RmlOutcome,
}

/// Runs `n_runs` independent RML minimizations in parallel.
pub fn rml_ensemble<F>(
    forward: &F,
    l: usize,
    obs: &ObservationSet,
    n_runs: usize,
    cfg: &LmConfig,
    seed: u64,
    moment_match: bool,
) -> Result<Vec<RmlRun>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    let draws = rml_draws(l, obs, n_runs, seed, moment_match)?;
    draws
        .into_par_iter()
        .enumerate()
        .map(|(i, (xi_star, d_star))| {
            let outcome =
                rml_sample(forward, &xi_star, &d_star, &obs.sd, cfg).context_with(|| format!("RML run {i}"))?;
            Ok(RmlRun {
                index: i,
                xi_star,
                outcome,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HmConfig {
    pub lm: LmConfig,
    pub noise: NoiseSpec,
    /// Days between observations.
    pub observation_interval: f64,
    /// Multiplies the measurement noise added to the truth data (0 = exact data).
    pub noise_scale: f64,
}

impl HmConfig {
    pub fn validate(&self) -> Result<()> {
        let lm = &self.lm;
        if lm.max_iterations == 0 || !(lm.fd_step > 0.0) || !(lm.lambda_init > 0.0) {
            return Err(Error::invalid("LM needs iterations >= 1, fd_step > 0 and lambda > 0"));
        }
        if !(lm.lambda_decrease > 0.0 && lm.lambda_decrease < 1.0 && lm.lambda_increase > 1.0) {
            return Err(Error::invalid(
                "LM damping factors must satisfy 0 < decrease < 1 < increase",
            ));
        }
        if !(self.noise.relative_sd >= 0.0 && self.noise.sd_floor > 0.0) {
            return Err(Error::invalid(
                "observation noise needs relative_sd >= 0 and sd_floor > 0",
            ));
        }
        if !(self.observation_interval > 0.0) || !(self.noise_scale >= 0.0) {
            return Err(Error::invalid("observation interval must be > 0 and noise scale >= 0"));
        }
        Ok(())
    }
}

impl Default for HmConfig {
    fn default() -> Self {
        HmConfig {
            lm: LmConfig::default(),
            noise: NoiseSpec::default(),
            observation_interval: 90.0,
            noise_scale: 1.0,
        }
    }
}

/// Simulator-backed forward model: latent vector to observed rates.
pub struct ReservoirForward<'a> {
    pub basis: &'a PcaBasis,
    pub fluid: &'a FluidSpec,
    pub wells: &'a [WellSpec],
    pub controls: &'a BhpSchedule,
    pub numerics: &'a Numerics,
    pub times: Vec<f64>,
}

impl ReservoirForward<'_> {
    pub fn rates(&self, xi: &[f64]) -> Result<RateSeries> {
        let m = pca_to_model(self.basis, xi)?;
        let end = self.times.last().copied().unwrap_or(0.0);
        Ok(Simulator::new(&m, self.fluid, self.wells, self.numerics)?
            .run(self.controls, end)?
            .rates)
    }

    pub fn data(&self, xi: &[f64]) -> Result<Vec<f64>> {
        Ok(extract_data(&self.rates(xi)?, self.wells, &self.times)?.0)
    }
}

/// History-matching result for one assimilation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmReport {
    pub n_observations: usize,
    pub window_end: f64,
    pub runs: Vec<HmRunReport>,
    pub total_simulations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmRunReport {
    pub index: usize,
    pub objective_initial: f64,
    pub objective_final: f64,
    pub mismatch_initial: f64,
    pub mismatch_final: f64,
    pub iterations: usize,
    pub simulations: usize,
    pub degraded: bool,
}

impl HmReport {
    pub fn new(obs: &ObservationSet, window_end: f64, runs: &[RmlRun]) -> Self {
        let runs: Vec<HmRunReport> = runs
            .iter()
            .map(|r| HmRunReport {
                index: r.index,
                objective_initial: r.outcome.objective_history[0],
                objective_final: *r.outcome.objective_history.last().expect("history starts nonempty"),
                mismatch_initial: r.outcome.mismatch_initial,
                mismatch_final: r.outcome.mismatch_final,
                iterations: r.outcome.iterations,
                simulations: r.outcome.simulations,
                degraded: r.outcome.degraded,
            })
            .collect();
        HmReport {
            n_observations: obs.len(),
            window_end,
            total_simulations: runs.iter().map(|r| r.simulations).sum(),
            runs,
        }
    }

    /// Fraction of runs whose data mismatch decreased.
    pub fn improved_fraction(&self) -> f64 {
        let n = self
            .runs
            .iter()
            .filter(|r| r.mismatch_final < r.mismatch_initial)
            .count();
        n as f64 / self.runs.len().max(1) as f64
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Posterior geomodels from RML runs, one per run.
pub fn posterior_models(basis: &PcaBasis, runs: &[RmlRun]) -> Result<Vec<Geomodel>> {
    runs.iter().map(|r| pca_to_model(basis, &r.outcome.xi)).collect()
}

/// Writes `model_NNN.bin` for each posterior model plus `hm_report.json`.
pub fn save_posterior(dir: &Path, models: &[Geomodel], report: &HmReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, m) in models.iter().enumerate() {
        m.save_binary(&dir.join(format!("model_{i:04}.bin")))?;
    }
    report.write_json(&dir.join("hm_report.json"))
}
