use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resim::RateSeries;

/// Per-stream offsets added to the simulated rate in the relative error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorConfig {
    /// m³/day
    pub alpha_inj_water: f64,
    pub alpha_prod_oil: f64,
    pub alpha_prod_water: f64,
    /// Lower bound on `q_sim + alpha` so fully shut streams stay finite (m³/day).
    pub denominator_floor: f64,
}

impl Default for ErrorConfig {
    fn default() -> Self {
        ErrorConfig {
            alpha_inj_water: 0.0,
            alpha_prod_oil: 0.0,
            alpha_prod_water: 20.0,
            denominator_floor: 1.0,
        }
    }
}

impl ErrorConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.alpha_inj_water,
            self.alpha_prod_oil,
            self.alpha_prod_water,
            self.denominator_floor,
        ];
        if all.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
            return Err(Error::invalid("error offsets must be finite and >= 0"));
        }
        Ok(())
    }

    /// Offsets in canonical stream order for a series with the given well counts.
    pub fn stream_alphas(&self, n_inj: usize, n_prod: usize) -> Vec<f64> {
        std::iter::repeat_n(self.alpha_inj_water, n_inj)
            .chain(std::iter::repeat_n(self.alpha_prod_oil, n_prod))
            .chain(std::iter::repeat_n(self.alpha_prod_water, n_prod))
            .collect()
    }

    #[inline]
    pub fn denominator(&self, q_sim: f64, alpha: f64) -> f64 {
        let d = q_sim + alpha;
        if d > 0.0 {
            d
        } else {
            self.denominator_floor
        }
    }
}

fn check_shapes(sim: &RateSeries, prox: &RateSeries, start_t: usize) -> Result<()> {
    if !sim.same_shape(prox) {
        return Err(Error::shape(
            "sample_error",
            format!("{}x{}", sim.n_streams(), sim.n_times()),
            format!("{}x{}", prox.n_streams(), prox.n_times()),
        ));
    }
    if !(start_t == 1 || start_t == 2) || start_t > sim.n_times() {
        return Err(Error::invalid(format!("start_t must be 1 or 2, got {start_t}")));
    }
    Ok(())
}

/// Literal per-stream sums `Σ_{t >= start_t} |q_sim - q_prox| / (q_sim + alpha)`.
pub fn stream_error_sums(sim: &RateSeries, prox: &RateSeries, ec: &ErrorConfig, start_t: usize) -> Result<Vec<f64>> {
    check_shapes(sim, prox, start_t)?;
    let alphas = ec.stream_alphas(sim.n_injectors(), sim.n_producers());
    Ok(sim
        .streams()
        .zip(prox.streams())
        .zip(alphas)
        .map(|((s, p), a)| {
            s.iter()
                .zip(p)
                .skip(start_t - 1)
                .map(|(qs, qp)| (qs - qp).abs() / ec.denominator(*qs, a))
                .sum()
        })
        .collect())
}

/// Sample error: mean over well-phase streams of the time-averaged relative error.
/// `start_t = 1` includes the day-0 row (training loss), `start_t = 2` excludes it.
pub fn sample_error(sim: &RateSeries, prox: &RateSeries, ec: &ErrorConfig, start_t: usize) -> Result<f64> {
    let sums = stream_error_sums(sim, prox, ec, start_t)?;
    let terms = (sim.n_times() + 1 - start_t) as f64;
    Ok(sums.iter().map(|s| s / terms).sum::<f64>() / sums.len() as f64)
}

/// Mean sample error over paired simulated and predicted series.
pub fn ensemble_error(sims: &[RateSeries], proxs: &[RateSeries], ec: &ErrorConfig, start_t: usize) -> Result<f64> {
    if sims.is_empty() || sims.len() != proxs.len() {
        return Err(Error::shape("ensemble_error", sims.len(), proxs.len()));
    }
    let mut total = 0.0;
    for (s, p) in sims.iter().zip(proxs) {
        total += sample_error(s, p, ec, start_t)?;
    }
    Ok(total / sims.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resim::{WellKind, WellSpec};

    fn wells(n_inj: usize, n_prod: usize) -> Vec<WellSpec> {
        let mk = |name: String, kind, i| WellSpec {
            name,
            kind,
            i,
            j: 0,
            k_top: 0,
            k_bottom: 0,
            r_w: 0.1,
        };
        (0..n_inj)
            .map(|i| mk(format!("I{i}"), WellKind::Injector, i))
            .chain((0..n_prod).map(|i| mk(format!("P{i}"), WellKind::Producer, n_inj + i)))
            .collect()
    }

    fn series(n_inj: usize, n_prod: usize, fill: f64) -> RateSeries {
        let times = (0..31).map(|t| 30.0 * t as f64).collect();
        let mut r = RateSeries::zeros(times, &wells(n_inj, n_prod));
        r.streams_mut().for_each(|s| s.iter_mut().for_each(|v| *v = fill));
        r
    }

    #[test]
    fn identical_series_have_zero_error() {
        let s = series(1, 2, 50.0);
        assert_eq!(sample_error(&s, &s, &ErrorConfig::default(), 2).unwrap(), 0.0);
        assert_eq!(
            ensemble_error(&[s.clone()], &[s], &ErrorConfig::default(), 1).unwrap(),
            0.0
        );
    }

    #[test]
    fn zero_water_stream_hand_value() {
        let sim = series(0, 1, 0.0);
        let mut prox = sim.clone();
        prox.prod_water[0].iter_mut().for_each(|v| *v = 10.0);
        let ec = ErrorConfig::default();
        let sums = stream_error_sums(&sim, &prox, &ec, 2).unwrap();
        assert_eq!(sums, vec![0.0, 15.0]);
        // Time-averaged: 15 / 30 per stream, averaged over 2 streams.
        assert!((sample_error(&sim, &prox, &ec, 2).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn scale_invariance_without_offsets() {
        let ec = ErrorConfig {
            alpha_prod_water: 0.0,
            ..ErrorConfig::default()
        };
        let mut sim = series(1, 1, 0.0);
        let mut prox = sim.clone();
        for (k, (s, p)) in sim.streams_mut().zip(prox.streams_mut()).enumerate() {
            for t in 0..31 {
                s[t] = 10.0 + (t * (k + 1)) as f64;
                p[t] = s[t] * (1.0 + 0.01 * ((t % 5) as f64 - 2.0));
            }
        }
        let e = sample_error(&sim, &prox, &ec, 2).unwrap();
        let scale = |r: &RateSeries, c: f64| {
            let mut r = r.clone();
            r.streams_mut().for_each(|s| s.iter_mut().for_each(|v| *v *= c));
            r
        };
        let e2 = sample_error(&scale(&sim, 3.7), &scale(&prox, 3.7), &ec, 2).unwrap();
        assert!((e - e2).abs() < 1e-14);
    }

    #[test]
    fn ensemble_error_averages() {
        let sim = series(1, 0, 100.0);
        let p1 = series(1, 0, 104.0);
        let p2 = series(1, 0, 108.0);
        let ec = ErrorConfig::default();
        let e = ensemble_error(&[sim.clone(), sim], &[p1, p2], &ec, 2).unwrap();
        assert!((e - 0.06).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_and_start_checked() {
        let a = series(1, 1, 1.0);
        let b = series(1, 2, 1.0);
        assert!(sample_error(&a, &b, &ErrorConfig::default(), 2).is_err());
        assert!(sample_error(&a, &a, &ErrorConfig::default(), 3).is_err());
    }
}
