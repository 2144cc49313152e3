use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Sample, Split};
use super::error::{ensemble_error, ErrorConfig};
use super::model::{Batch, BnMode, Normalization, ProxyModel};
use crate::error::{Error, Result};
use crate::geostat::Geomodel;
use crate::nn::{AdamState, Graph};
use crate::resim::{BhpSchedule, RateSeries};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Stop once the training-set error falls below this.
    pub tol: f64,
    pub lr: f64,
    /// Learning rate after the training error first drops below `2 * tol`.
    pub lr_low: f64,
    /// Keep `lr` for the whole run (retraining).
    #[serde(default)]
    pub fixed_lr: bool,
    pub max_epochs: usize,
    /// Abort once the loss exceeds this multiple of its first value.
    pub divergence_factor: f64,
    /// Evaluate the test split every this many epochs (0 = only at the end).
    pub test_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tol: 0.05,
            lr: 1e-3,
            lr_low: 1e-4,
            fixed_lr: false,
            max_epochs: 20_000,
            divergence_factor: 10.0,
            test_every: 50,
        }
    }
}

impl TrainConfig {
    /// Warm-start continuation at a fixed learning rate.
    pub fn retrain(lr: f64) -> Self {
        TrainConfig {
            lr,
            lr_low: lr,
            fixed_lr: true,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || !(self.lr >= 0.0) || !(self.lr_low >= 0.0) || !(self.divergence_factor > 1.0) {
            return Err(Error::invalid(
                "training needs tol > 0, lr >= 0 and divergence factor > 1",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub loss: f64,
    pub e_train: f64,
    pub e_test: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub rows: Vec<HistoryRow>,
    pub stop: StopReason,
}

impl History {
    pub fn epochs(&self) -> usize {
        self.rows.last().map_or(0, |r| r.epoch)
    }

    pub fn final_row(&self) -> &HistoryRow {
        self.rows.last().expect("history has at least one row")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,L,E_train,E_test,lr\n");
        for r in &self.rows {
            let test = r.e_test.map(|v| format!("{v:.10e}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{:.10e},{:.10e},{},{:e}",
                r.epoch, r.loss, r.e_train, test, r.lr
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn split_pairs<'a>(samples: &[&'a Sample]) -> (Vec<&'a BhpSchedule>, Vec<(usize, usize)>) {
    let scheds = samples.iter().map(|s| &s.schedule).collect();
    let pairs = samples.iter().enumerate().map(|(i, s)| (s.realization, i)).collect();
    (scheds, pairs)
}

/// Loss targets and weights in the (t, sample) row layout of the network output,
/// so the weighted L1 equals the mean time-averaged relative error with the
/// day-0 row included.
fn loss_terms(norm: &Normalization, targets: &[&RateSeries], ec: &ErrorConfig) -> (Vec<f64>, Vec<f64>) {
    let b = targets.len();
    let first = targets[0];
    let (nt, nout) = (first.n_times(), first.n_streams());
    let alphas = ec.stream_alphas(first.n_injectors(), first.n_producers());
    let mut target = vec![0.0; nt * b * nout];
    let mut weight = vec![0.0; nt * b * nout];
    let scale = 1.0 / (nt as f64 * nout as f64 * b as f64);
    for (i, r) in targets.iter().enumerate() {
        for (o, stream) in r.streams().enumerate() {
            let s = norm.out_scale[o];
            for (t, &q) in stream.iter().enumerate() {
                let k = (t * b + i) * nout + o;
                target[k] = q / s;
                weight[k] = s * scale / ec.denominator(q, alphas[o]);
            }
        }
    }
    (target, weight)
}

/// Error on `samples` with the network in inference mode.
pub fn evaluate(model: &ProxyModel, models: &[&Geomodel], samples: &[&Sample], ec: &ErrorConfig) -> Result<f64> {
    let (scheds, pairs) = split_pairs(samples);
    let pred = model.predict(models, &scheds, &pairs)?;
    let sims: Vec<RateSeries> = samples.iter().map(|s| s.rates.clone()).collect();
    ensemble_error(&sims, &pred, ec, 2)
}

fn fit_normalization(models: &[&Geomodel], train: &[&Sample]) -> Result<Normalization> {
    let mut used: Vec<usize> = train.iter().map(|s| s.realization).collect();
    used.sort_unstable();
    used.dedup();
    let ms: Vec<&Geomodel> = used.iter().map(|&i| models[i]).collect();
    let rates: Vec<&RateSeries> = train.iter().map(|s| &s.rates).collect();
    Normalization::fit(&ms, &rates, train[0].schedule.bounds.clone())
}

/// Full-batch Adam on the training split. Fits normalization statistics if the
/// model has none; otherwise keeps them frozen (warm start).
pub fn train(
    model: &mut ProxyModel,
    ds: &Dataset,
    models: &[&Geomodel],
    cfg: &TrainConfig,
    ec: &ErrorConfig,
) -> Result<History> {
    cfg.validate()?;
    ec.validate()?;
    let train_set = ds.split(Split::Train);
    let test_set = ds.split(Split::Test);
    if train_set.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    if ds.samples.iter().any(|s| s.realization >= models.len()) {
        return Err(Error::invalid("dataset refers to a realization outside the model list"));
    }
    if model.norm.is_none() {
        model.norm = Some(fit_normalization(models, &train_set)?);
    }
    let (scheds, pairs) = split_pairs(&train_set);
    let batch: Batch = model.batch(models, &scheds, &pairs)?;
    let targets: Vec<&RateSeries> = train_set.iter().map(|s| &s.rates).collect();
    let (target, weight) = loss_terms(model.normalization()?, &targets, ec);
    let sims: Vec<RateSeries> = targets.iter().map(|r| (*r).clone()).collect();

    let mut adam = AdamState::new(&model.store, cfg.lr);
    let mut rows = Vec::new();
    let mut first_loss = None;
    for epoch in 0..=cfg.max_epochs {
        let mut g = Graph::new();
        let f = model.forward_graph(&mut g, &batch, BnMode::Train, true)?;
        let loss_var = g.weighted_l1(f.pred, target.clone(), weight.clone())?;
        let loss = g.value(loss_var).data[0];
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged {
                epoch,
                reason: "non-finite loss".into(),
            });
        }
        let l0 = *first_loss.get_or_insert(loss);
        if loss > cfg.divergence_factor * l0 {
            return Err(Error::TrainingDiverged {
                epoch,
                reason: format!("loss {loss:.4e} exceeds {} x initial {l0:.4e}", cfg.divergence_factor),
            });
        }
        let pred = model.to_rates(g.value(f.pred), train_set.len(), true)?;
        let e_train = ensemble_error(&sims, &pred, ec, 2)?;

        // Full batch: the batch statistics are the training-set statistics.
        model.set_running_stats(&f.bn_stats);
        let done = e_train < cfg.tol;
        let last = done || epoch == cfg.max_epochs;
        let e_test = if !test_set.is_empty() && (last || (cfg.test_every > 0 && epoch % cfg.test_every == 0)) {
            Some(evaluate(model, models, &test_set, ec)?)
        } else {
            None
        };
        if !cfg.fixed_lr && e_train < 2.0 * cfg.tol {
            adam.lr = cfg.lr_low;
        }
        rows.push(HistoryRow {
            epoch,
            loss,
            e_train,
            e_test,
            lr: adam.lr,
        });
        if last {
            let stop = if done {
                StopReason::Converged
            } else {
                StopReason::MaxEpochs
            };
            return Ok(History { rows, stop });
        }
        g.backward(loss_var)?;
        let grads = g.param_grads(&model.store);
        adam.update(&mut model.store, &grads)?;
        if !model.store.is_finite() {
            return Err(Error::TrainingDiverged {
                epoch,
                reason: "non-finite parameters".into(),
            });
        }
    }
    unreachable!("loop returns on its last epoch")
}

/// Warm-start continuation on a new dataset with frozen normalization.
pub fn retrain(
    model: &mut ProxyModel,
    ds: &Dataset,
    models: &[&Geomodel],
    cfg: &TrainConfig,
    ec: &ErrorConfig,
) -> Result<History> {
    if model.norm.is_none() {
        return Err(Error::invalid("retraining needs a previously trained proxy"));
    }
    train(model, ds, models, cfg, ec)
}
