use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::{sample_error, Dataset, ErrorConfig, ProxyModel, Split};
use crate::error::{Error, Result};
use crate::geostat::Geomodel;
use crate::resim::{BhpSchedule, RateSeries};

/// Linear-interpolation percentile of an ascending slice.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let x = p / 100.0 * (sorted.len() - 1) as f64;
    let (lo, hi) = (x.floor() as usize, x.ceil() as usize);
    sorted[lo] + (x - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per-sample proxy errors on one dataset split.
#[derive(Debug, Clone, Serialize)]
pub struct SplitEvaluation {
    pub split: String,
    pub n_samples: usize,
    pub e: f64,
    pub p10: f64,
    pub p50: f64,
    pub p90: f64,
    pub sample_errors: Vec<f64>,
    #[serde(skip)]
    simulated: Vec<RateSeries>,
    #[serde(skip)]
    predicted: Vec<RateSeries>,
    #[serde(skip)]
    realizations: Vec<usize>,
}

pub fn evaluate_split(
    model: &ProxyModel,
    ds: &Dataset,
    models: &[&Geomodel],
    split: Split,
    ec: &ErrorConfig,
) -> Result<SplitEvaluation> {
    let name = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let samples = ds.split(split);
    if samples.is_empty() {
        return Err(Error::invalid(format!("{name} split is empty")));
    }
    let scheds: Vec<&BhpSchedule> = samples.iter().map(|s| &s.schedule).collect();
    let pairs: Vec<(usize, usize)> = samples.iter().enumerate().map(|(k, s)| (s.realization, k)).collect();
    let predicted = model.predict(models, &scheds, &pairs)?;
    let errors = samples
        .iter()
        .zip(&predicted)
        .map(|(s, p)| sample_error(&s.rates, p, ec, 2))
        .collect::<Result<Vec<f64>>>()?;
    let mut sorted = errors.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(SplitEvaluation {
        split: name.into(),
        n_samples: errors.len(),
        e: errors.iter().sum::<f64>() / errors.len() as f64,
        p10: percentile(&sorted, 10.0),
        p50: percentile(&sorted, 50.0),
        p90: percentile(&sorted, 90.0),
        sample_errors: errors,
        simulated: samples.iter().map(|s| s.rates.clone()).collect(),
        predicted,
        realizations: samples.iter().map(|s| ds.realization_ids[s.realization]).collect(),
    })
}

impl SplitEvaluation {
    /// Sample indices from smallest to largest error.
    pub fn ranking(&self) -> Vec<usize> {
        let e = &self.sample_errors;
        let mut order: Vec<usize> = (0..e.len()).collect();
        order.sort_by(|&a, &b| e[a].total_cmp(&e[b]).then(a.cmp(&b)));
        order
    }

    /// Writes `eval.json`, `error_rank.csv` and the simulated/proxy rates of the
    /// P10/P50/P90 samples under `eval_rates/`.
    pub fn write(&self, ds: &Dataset, dir: &Path) -> Result<()> {
        let rates_dir = dir.join("eval_rates");
        std::fs::create_dir_all(&rates_dir).map_err(|e| Error::io(&rates_dir, e))?;
        let json = dir.join("eval.json");
        std::fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;

        let order = self.ranking();
        let mut rank = String::from("rank,sample,realization,error\n");
        for (r, &k) in order.iter().enumerate() {
            let _ = writeln!(
                rank,
                "{},{k},{},{:.10}",
                r + 1,
                self.realizations[k],
                self.sample_errors[k]
            );
        }
        let path = dir.join("error_rank.csv");
        std::fs::write(&path, rank).map_err(|e| Error::io(&path, e))?;
        for (label, p) in [("p10", 10.0), ("p50", 50.0), ("p90", 90.0)] {
            let k = order[((p / 100.0) * (order.len() - 1) as f64).round() as usize];
            self.simulated[k].write_csv(&ds.wells, &rates_dir.join(format!("{label}_simulated.csv")))?;
            self.predicted[k].write_csv(&ds.wells, &rates_dir.join(format!("{label}_proxy.csv")))?;
        }
        Ok(())
    }
}
