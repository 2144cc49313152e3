use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ResultExt};
use crate::geostat::Geomodel;
use crate::resim::{self, BhpSchedule, FluidSpec, Numerics, RateSeries, WellSpec};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Index into the model list the dataset was built from.
    pub realization: usize,
    pub schedule: BhpSchedule,
    pub rates: RateSeries,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_train_per_model: usize,
    pub n_test_per_model: usize,
    /// Leading control steps copied from the prefix schedule.
    pub fixed_steps: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn per_model(&self) -> usize {
        self.n_train_per_model + self.n_test_per_model
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    /// Realization ids as known to the caller (one per model).
    pub realization_ids: Vec<usize>,
    pub wells: Vec<WellSpec>,
    pub samples: Vec<Sample>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    file_stem: String,
    realization: usize,
    realization_id: usize,
    split: Split,
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    spec: DatasetSpec,
    bounds: Vec<(f64, f64)>,
    control_duration: f64,
    realization_ids: Vec<usize>,
    wells: Vec<WellSpec>,
    samples: Vec<ManifestEntry>,
}

/// Draws one schedule: prefix steps copied, free steps uniform within bounds.
pub fn draw_schedule(prefix: &BhpSchedule, fixed_steps: usize, seed: u64, realization: usize, j: usize) -> BhpSchedule {
    let mut rng = rng::stream(seed, &[rng::tag::SCHEDULE, realization as u64, j as u64]);
    let mut u = prefix.clone();
    for step in fixed_steps..u.n_steps() {
        for w in 0..u.n_wells() {
            let (lo, hi) = u.bounds[w];
            u.bhp[w][step] = if hi > lo { rng.random_range(lo..hi) } else { lo };
        }
    }
    u
}

/// Generates schedules for every model and simulates each (model, schedule) pair.
pub fn make_dataset(
    models: &[&Geomodel],
    realization_ids: &[usize],
    fluid: &FluidSpec,
    wells: &[WellSpec],
    prefix: &BhpSchedule,
    spec: &DatasetSpec,
    numerics: &Numerics,
) -> Result<Dataset> {
    if models.is_empty() || spec.per_model() == 0 {
        return Err(Error::invalid(
            "dataset needs at least one model and one schedule per model",
        ));
    }
    if realization_ids.len() != models.len() {
        return Err(Error::shape("realization ids", models.len(), realization_ids.len()));
    }
    let g = &models[0].grid;
    if models.iter().any(|m| m.grid != *g) {
        return Err(Error::invalid("dataset models must share one grid"));
    }
    prefix.validate()?;
    if spec.fixed_steps > prefix.n_steps() {
        return Err(Error::invalid("fixed prefix longer than the schedule"));
    }
    let jobs: Vec<(usize, usize)> = (0..models.len())
        .flat_map(|r| (0..spec.per_model()).map(move |j| (r, j)))
        .collect();
    let samples: Result<Vec<Sample>> = jobs
        .par_iter()
        .map(|&(r, j)| {
            let u = draw_schedule(prefix, spec.fixed_steps, spec.seed, realization_ids[r], j);
            let out = resim::simulate(models[r], fluid, wells, &u, numerics)
                .context_with(|| format!("dataset sample (realization {}, schedule {j})", realization_ids[r]))?;
            Ok(Sample {
                realization: r,
                schedule: u,
                rates: out,
                split: if j < spec.n_train_per_model {
                    Split::Train
                } else {
                    Split::Test
                },
            })
        })
        .collect();
    Ok(Dataset {
        spec: spec.clone(),
        realization_ids: realization_ids.to_vec(),
        wells: wells.to_vec(),
        samples: samples?,
    })
}

impl Dataset {
    pub fn split(&self, s: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|x| x.split == s).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Writes `manifest.json` plus `sample_NNNN_rates.csv` and `sample_NNNN_schedule.csv`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let first = self
            .samples
            .first()
            .ok_or_else(|| Error::invalid("cannot save an empty dataset"))?;
        let mut entries = Vec::with_capacity(self.samples.len());
        for (i, s) in self.samples.iter().enumerate() {
            let stem = format!("sample_{i:04}");
            s.rates.write_csv(&self.wells, &dir.join(format!("{stem}_rates.csv")))?;
            s.schedule
                .write_csv(&self.wells, &dir.join(format!("{stem}_schedule.csv")))?;
            entries.push(ManifestEntry {
                file_stem: stem,
                realization: s.realization,
                realization_id: self.realization_ids[s.realization],
                split: s.split,
            });
        }
        let manifest = DatasetManifest {
            spec: self.spec.clone(),
            bounds: first.schedule.bounds.clone(),
            control_duration: first.schedule.control_duration,
            realization_ids: self.realization_ids.clone(),
            wells: self.wells.clone(),
            samples: entries,
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for e in &manifest.samples {
            if e.realization >= manifest.realization_ids.len() {
                return Err(Error::format(
                    &path,
                    format!("sample {} has no realization", e.file_stem),
                ));
            }
            let schedule = BhpSchedule::read_csv(
                &dir.join(format!("{}_schedule.csv", e.file_stem)),
                &manifest.wells,
                manifest.control_duration,
                &manifest.bounds,
            )?;
            samples.push(Sample {
                realization: e.realization,
                schedule,
                rates: RateSeries::read_csv(&dir.join(format!("{}_rates.csv", e.file_stem)), &manifest.wells)?,
                split: e.split,
            });
        }
        Ok(Dataset {
            spec: manifest.spec,
            realization_ids: manifest.realization_ids,
            wells: manifest.wells,
            samples,
        })
    }
}
