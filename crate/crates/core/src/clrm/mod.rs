//! Closed loop: train, optimize, operate the truth, observe, history match,
//! retrain, repeat. Keeps the simulation ledger.

mod ledger;

pub use ledger::{format_count, planned_ledger, Ledger, LedgerReport};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result, ResultExt};
use crate::geostat::{build_pca, draw_hard_data, sample_realizations, Geomodel, HardData, PcaBasis};
use crate::hm::{self, HmReport, ObservationSet, ReservoirForward};
use crate::proxy::{self, build_proxy, make_dataset, DatasetSpec, History, ProxyModel, Split};
use crate::resim::{well_cells, BhpSchedule, RateSeries, Simulator};
use crate::rng;
use crate::robustopt::{
    npv, robust_eval, robust_optimize, trim_count, write_trace_csv, ProxyEvaluator, RateEvaluator, SimulatorEvaluator,
};

/// Generated realizations split into PCA set (first `n_pca`) and truths.
pub struct Realizations {
    pub hard_data: HardData,
    pub models: Vec<Geomodel>,
    pub n_pca: usize,
}

impl Realizations {
    pub fn pca_set(&self) -> &[Geomodel] {
        &self.models[..self.n_pca]
    }

    pub fn truths(&self) -> &[Geomodel] {
        &self.models[self.n_pca..]
    }
}

pub fn generate_realizations(cfg: &RunConfig) -> Result<Realizations> {
    let e = &cfg.ensemble;
    let hard_data = if e.hard_data {
        draw_hard_data(&cfg.grid, &cfg.variogram, &well_cells(&cfg.wells, &cfg.grid), cfg.seed)?
    } else {
        HardData::default()
    };
    let models = sample_realizations(&cfg.grid, &cfg.variogram, &hard_data, e.n_pca + e.n_truth, cfg.seed)?;
    Ok(Realizations {
        hard_data,
        models,
        n_pca: e.n_pca,
    })
}

/// PCA on the PCA set, capped at `max_latent` components.
pub fn build_basis(cfg: &RunConfig, pca_set: &[Geomodel]) -> Result<PcaBasis> {
    let b = build_pca(pca_set, cfg.ensemble.pca_energy)?;
    match cfg.ensemble.max_latent {
        Some(l) => b.truncate(l),
        None => Ok(b),
    }
}

/// The synthetic truth. Only noisy observations and operated rates leave it.
struct Truth<'a> {
    model: &'a Geomodel,
    cfg: &'a RunConfig,
}

impl Truth<'_> {
    fn rates(&self, u: &BhpSchedule, end: f64) -> Result<RateSeries> {
        Ok(
            Simulator::new(self.model, &self.cfg.fluid, &self.cfg.wells, &self.cfg.numerics)?
                .run(u, end)?
                .rates,
        )
    }

    fn observe(&self, operated: &BhpSchedule, window_end: f64, seed: u64) -> Result<ObservationSet> {
        let hmc = &self.cfg.history_matching;
        let times = hm::observation_times(window_end, hmc.observation_interval);
        let r = self.rates(operated, window_end)?;
        let (d, labels) = hm::extract_data(&r, &self.cfg.wells, &times)?;
        Ok(hm::perturb_observations(
            &d,
            labels,
            times,
            &hmc.noise,
            hmc.noise_scale,
            seed,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub epochs: usize,
    pub stop: proxy::StopReason,
    pub e_train: f64,
    pub e_test: Option<f64>,
    pub simulations: usize,
    pub test_simulations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmSummary {
    pub n_observations: usize,
    pub window_end: f64,
    pub improved_fraction: f64,
    pub degraded_runs: usize,
    pub simulations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    /// 1-based.
    pub cycle: usize,
    /// 0-based index of the first optimized control step.
    pub first_free: usize,
    pub free_variables: usize,
    pub schedule: BhpSchedule,
    /// `prior` or `posterior_<c>`.
    pub ensemble: String,
    pub proxy_npvs: Vec<f64>,
    pub proxy_kept: Vec<usize>,
    pub proxy_expected_npv: f64,
    pub simulator_npvs: Vec<f64>,
    pub simulator_kept: Vec<usize>,
    pub simulator_expected_npv: f64,
    /// Interquartile range of the simulator NPVs over all realizations.
    pub simulator_npv_iqr: f64,
    /// Aggregate violation at the optimum as seen by the optimizer.
    pub h: f64,
    /// Per constraint, worst simulator value over the proxy-kept realizations.
    pub simulator_constraint_max: Vec<f64>,
    pub truth_npv: f64,
    pub truth_constraint_max: Vec<f64>,
    pub optimizer_evaluations: usize,
    pub training: TrainingSummary,
    pub hm: Option<HmSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub status: String,
    pub error: Option<String>,
    pub seed: u64,
    pub profile: String,
    pub latent_dim: usize,
    pub pca_energy: f64,
    pub constraint_labels: Vec<String>,
    pub constraint_limits: Vec<f64>,
    pub cycles: Vec<CycleRecord>,
    /// Simulator-evaluated expected NPV of the first and last cycle schedules
    /// on the final ensemble.
    pub final_ensemble_npv_first_schedule: Option<f64>,
    pub final_ensemble_npv_last_schedule: Option<f64>,
    pub ledger: Option<Ledger>,
}

pub struct ClrmOutcome {
    pub summary: Summary,
    pub proxy: ProxyModel,
    pub ensemble: Vec<Geomodel>,
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    write(path, &serde_json::to_string_pretty(v)?)
}

fn iqr(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let x = p * (v.len() - 1) as f64;
        let (lo, hi) = (x.floor() as usize, x.ceil() as usize);
        v[lo] + (x - lo as f64) * (v[hi] - v[lo])
    };
    q(0.75) - q(0.25)
}

fn training_summary(h: &History, ds: &proxy::Dataset) -> TrainingSummary {
    let last = h.final_row();
    TrainingSummary {
        epochs: h.epochs(),
        stop: h.stop,
        e_train: last.e_train,
        e_test: last.e_test,
        simulations: ds.split(proxy::Split::Train).len(),
        test_simulations: ds.split(proxy::Split::Test).len(),
    }
}

fn npv_csv(rec: &CycleRecord) -> String {
    let mut out = String::from("realization,proxy_npv,simulator_npv,proxy_kept,simulator_kept\n");
    for s in 0..rec.proxy_npvs.len() {
        let _ = writeln!(
            out,
            "{s},{:.6},{:.6},{},{}",
            rec.proxy_npvs[s],
            rec.simulator_npvs[s],
            u8::from(rec.proxy_kept.contains(&s)),
            u8::from(rec.simulator_kept.contains(&s))
        );
    }
    out
}

fn constraint_csv(
    cfg: &RunConfig,
    proxy: &[RateSeries],
    sim: &[RateSeries],
    kept: &[usize],
    truth: &RateSeries,
) -> Result<String> {
    let mut out = String::from("source,realization,constraint,limit,time,value\n");
    let mut rows = |source: &str, id: &str, r: &RateSeries| -> Result<()> {
        for c in &cfg.constraints {
            for (t, v) in r.report_times.iter().zip(c.series(r)?) {
                let _ = writeln!(out, "{source},{id},{},{},{t},{v:.6}", c.label(), c.limit);
            }
        }
        Ok(())
    };
    for &s in kept {
        rows("proxy", &s.to_string(), &proxy[s])?;
        rows("simulator", &s.to_string(), &sim[s])?;
    }
    rows("truth", "truth", truth)?;
    Ok(out)
}

/// Writes the per-cycle artifacts that do not depend on the run outcome.
struct RunDir(Option<PathBuf>);

impl RunDir {
    fn cycle(&self, c: usize) -> Result<Option<PathBuf>> {
        match &self.0 {
            None => Ok(None),
            Some(root) => {
                let d = root.join(format!("cycle_{c}"));
                std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
                Ok(Some(d))
            }
        }
    }
}

/// Runs the full closed loop. With `out`, writes the run directory as it goes
/// and a partial `summary.json` if a cycle fails.
pub fn run_clrm(cfg: &RunConfig, out: Option<&Path>) -> Result<ClrmOutcome> {
    cfg.validate()?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        cfg.save(&dir.join("config.toml"))?;
    }
    let mut summary = Summary {
        status: "running".into(),
        error: None,
        seed: cfg.seed,
        profile: cfg.profile.name().into(),
        latent_dim: 0,
        pca_energy: 0.0,
        constraint_labels: cfg.constraints.iter().map(|c| c.label()).collect(),
        constraint_limits: cfg.constraints.iter().map(|c| c.limit).collect(),
        cycles: Vec::new(),
        final_ensemble_npv_first_schedule: None,
        final_ensemble_npv_last_schedule: None,
        ledger: None,
    };
    match run_inner(cfg, out, &mut summary) {
        Ok((proxy, ensemble)) => {
            summary.status = "completed".into();
            if let Some(dir) = out {
                write_json(&dir.join("summary.json"), &summary)?;
            }
            Ok(ClrmOutcome {
                summary,
                proxy,
                ensemble,
            })
        }
        Err(e) => {
            if let Some(dir) = out {
                summary.status = "failed".into();
                summary.error = Some(e.to_string());
                let _ = write_json(&dir.join("summary.json"), &summary);
            }
            Err(e)
        }
    }
}

fn run_inner(cfg: &RunConfig, out: Option<&Path>, summary: &mut Summary) -> Result<(ProxyModel, Vec<Geomodel>)> {
    let dirs = RunDir(out.map(Path::to_path_buf));
    let seed = cfg.seed;
    let stream = |c: usize, k: u64| rng::derive_seed(seed, &[rng::tag::CLRM, c as u64, k]);
    let n_r = cfg.ensemble.n_prior;
    let trim = trim_count(n_r, cfg.optimization.trim_fraction)?;

    let reals = generate_realizations(cfg)?;
    let basis = build_basis(cfg, reals.pca_set())?;
    summary.latent_dim = basis.l;
    summary.pca_energy = basis.energy_fraction;
    let truth = Truth {
        model: &reals.truths()[cfg.clrm.truth],
        cfg,
    };
    let mut ensemble: Vec<Geomodel> = reals.pca_set()[..n_r].to_vec();
    let mut ensemble_name = String::from("prior");
    let ids: Vec<usize> = (0..n_r).collect();

    let mut ledger = Ledger::new(cfg);
    let mut operated = cfg.base_schedule();
    let mut first_schedule: Option<BhpSchedule> = None;

    // Initial training on the prior ensemble.
    let refs: Vec<&Geomodel> = ensemble.iter().collect();
    let spec = DatasetSpec {
        n_train_per_model: cfg.proxy.n_train_per_model,
        n_test_per_model: cfg.proxy.n_test_per_model,
        fixed_steps: 0,
        seed: stream(0, 0),
    };
    let ds = make_dataset(&refs, &ids, &cfg.fluid, &cfg.wells, &operated, &spec, &cfg.numerics)
        .context_with(|| "initial training dataset".into())?;
    let mut model = build_proxy(&cfg.proxy_config(), stream(0, 1))?;
    let hist = proxy::train(&mut model, &ds, &refs, &cfg.proxy.train, &cfg.proxy.error)
        .context_with(|| "initial proxy training".into())?;
    let mut training = training_summary(&hist, &ds);
    ledger.initial_training_sims = training.simulations;
    ledger.initial_test_sims = training.test_simulations;
    if let Some(dir) = &dirs.0 {
        if !ds.split(Split::Test).is_empty() {
            proxy::evaluate_split(&model, &ds, &refs, Split::Test, &cfg.proxy.error)?
                .write(&ds, &dir.join("proxy_eval"))?;
        }
    }
    let mut history_csv = hist.to_csv();

    for c in 1..=cfg.clrm.n_cycles {
        let first_free = c - 1;
        let cdir = dirs.cycle(c)?;
        let mut hm_summary = None;
        if c >= 2 {
            let window_end = first_free as f64 * cfg.controls.control_duration;
            let obs = truth.observe(&operated, window_end, stream(c, 2))?;
            let fwd = ReservoirForward {
                basis: &basis,
                fluid: &cfg.fluid,
                wells: &cfg.wells,
                controls: &operated,
                numerics: &cfg.numerics,
                times: obs.times.clone(),
            };
            let runs = hm::rml_ensemble(
                &|xi: &[f64]| fwd.data(xi),
                basis.l,
                &obs,
                n_r,
                &cfg.history_matching.lm,
                stream(c, 3),
                false,
            )
            .context_with(|| format!("history matching before cycle {c}"))?;
            let report = HmReport::new(&obs, window_end, &runs);
            ensemble = hm::posterior_models(&basis, &runs)?;
            ensemble_name = format!("posterior_{c}");
            if let Some(d) = &cdir {
                report.write_json(&d.join("hm_report.json"))?;
            }
            ledger.hm_sims.push(report.total_simulations);
            hm_summary = Some(HmSummary {
                n_observations: obs.len(),
                window_end,
                improved_fraction: report.improved_fraction(),
                degraded_runs: report.runs.iter().filter(|r| r.degraded).count(),
                simulations: report.total_simulations,
            });

            let refs: Vec<&Geomodel> = ensemble.iter().collect();
            let spec = DatasetSpec {
                n_train_per_model: cfg.proxy.retrain_train_per_model,
                n_test_per_model: cfg.proxy.retrain_test_per_model,
                fixed_steps: first_free,
                seed: stream(c, 0),
            };
            let ds = make_dataset(&refs, &ids, &cfg.fluid, &cfg.wells, &operated, &spec, &cfg.numerics)
                .context_with(|| format!("retraining dataset before cycle {c}"))?;
            let hist = proxy::retrain(&mut model, &ds, &refs, &cfg.proxy.retrain, &cfg.proxy.error)
                .context_with(|| format!("proxy retraining before cycle {c}"))?;
            training = training_summary(&hist, &ds);
            ledger.retraining_sims.push(training.simulations);
            ledger.retraining_test_sims.push(training.test_simulations);
            history_csv = hist.to_csv();
        }

        let refs: Vec<&Geomodel> = ensemble.iter().collect();
        let evaluator = ProxyEvaluator {
            proxy: &model,
            models: refs.clone(),
        };
        let res = robust_optimize(
            &evaluator,
            &cfg.economics,
            &cfg.constraints,
            &operated,
            first_free,
            &cfg.optimization,
            stream(c, 4),
        )
        .context_with(|| format!("robust optimization in cycle {c}"))?;
        ledger.proxy_schedule_evaluations += res.evaluations;
        let u = res.schedule;

        let proxy_rates = evaluator.evaluate(std::slice::from_ref(&u))?.remove(0);
        let p_eval = robust_eval(&proxy_rates, &cfg.economics, &cfg.constraints, trim)?;
        let sim_eval = SimulatorEvaluator {
            models: refs.clone(),
            fluid: &cfg.fluid,
            wells: &cfg.wells,
            numerics: &cfg.numerics,
        };
        let sim_rates = sim_eval
            .evaluate(std::slice::from_ref(&u))
            .context_with(|| format!("simulator validation in cycle {c}"))?
            .remove(0);
        ledger.validation_sims += sim_rates.len();
        let s_eval = robust_eval(&sim_rates, &cfg.economics, &cfg.constraints, trim)?;
        let mut sim_cmax = vec![f64::NEG_INFINITY; cfg.constraints.len()];
        for &s in &p_eval.kept {
            for (m, spec) in sim_cmax.iter_mut().zip(&cfg.constraints) {
                *m = m.max(spec.max_value(&sim_rates[s])?);
            }
        }

        let truth_rates = truth.rates(&u, u.horizon())?;
        ledger.truth_sims += 1;
        let truth_cmax: Result<Vec<f64>> = cfg.constraints.iter().map(|s| s.max_value(&truth_rates)).collect();

        let rec = CycleRecord {
            cycle: c,
            first_free,
            free_variables: u.free_vector(first_free).len(),
            schedule: u.clone(),
            ensemble: ensemble_name.clone(),
            proxy_expected_npv: -p_eval.j,
            proxy_npvs: p_eval.npvs,
            proxy_kept: p_eval.kept.clone(),
            simulator_expected_npv: -s_eval.j,
            simulator_npv_iqr: iqr(&s_eval.npvs),
            simulator_npvs: s_eval.npvs,
            simulator_kept: s_eval.kept,
            h: res.h,
            simulator_constraint_max: sim_cmax,
            truth_npv: npv(&truth_rates, &cfg.economics),
            truth_constraint_max: truth_cmax?,
            optimizer_evaluations: res.evaluations,
            training: training.clone(),
            hm: hm_summary,
        };
        if let Some(d) = &cdir {
            u.write_csv(&cfg.wells, &d.join("schedule.csv"))?;
            write(&d.join("npv_distribution.csv"), &npv_csv(&rec))?;
            write(
                &d.join("constraint_trace.csv"),
                &constraint_csv(cfg, &proxy_rates, &sim_rates, &p_eval.kept, &truth_rates)?,
            )?;
            write_trace_csv(&res.trace, &d.join("pso_trace.csv"))?;
            write(&d.join("training_history.csv"), &history_csv)?;
            write_json(&d.join("cycle.json"), &rec)?;
        }
        summary.cycles.push(rec);
        first_schedule.get_or_insert_with(|| u.clone());
        operated = u;
    }

    // Both schedules on the final ensemble; the last one was just validated.
    let first = first_schedule.expect("at least one cycle");
    let refs: Vec<&Geomodel> = ensemble.iter().collect();
    let sim_eval = SimulatorEvaluator {
        models: refs,
        fluid: &cfg.fluid,
        wells: &cfg.wells,
        numerics: &cfg.numerics,
    };
    let rates = sim_eval.evaluate(std::slice::from_ref(&first))?.remove(0);
    ledger.validation_sims += rates.len();
    summary.final_ensemble_npv_first_schedule = Some(-robust_eval(&rates, &cfg.economics, &cfg.constraints, trim)?.j);
    summary.final_ensemble_npv_last_schedule = summary.cycles.last().map(|r| r.simulator_expected_npv);

    if let Some(dir) = out {
        let mut csv = String::from("cycle,truth_npv,proxy_expected_npv,simulator_expected_npv,h\n");
        for r in &summary.cycles {
            let _ = writeln!(
                csv,
                "{},{:.6},{:.6},{:.6},{:.6e}",
                r.cycle, r.truth_npv, r.proxy_expected_npv, r.simulator_expected_npv, r.h
            );
        }
        write(&dir.join("npv_by_cycle.csv"), &csv)?;
        model.save(&dir.join("proxy"))?;
    }
    let ledger = ledger.finish(cfg);
    if let Some(dir) = out {
        write_json(&dir.join("ledger.json"), &ledger)?;
    }
    summary.ledger = Some(ledger);
    Ok((model, ensemble))
}

/// Posterior ensemble for a fixed operated schedule, used by the
/// `history-match` subcommand.
pub fn history_match(
    cfg: &RunConfig,
    basis: &PcaBasis,
    obs: &ObservationSet,
    controls: &BhpSchedule,
    seed: u64,
) -> Result<(Vec<Geomodel>, HmReport)> {
    let window_end = obs
        .times
        .last()
        .copied()
        .ok_or_else(|| Error::invalid("no observations"))?;
    let fwd = ReservoirForward {
        basis,
        fluid: &cfg.fluid,
        wells: &cfg.wells,
        controls,
        numerics: &cfg.numerics,
        times: obs.times.clone(),
    };
    let runs = hm::rml_ensemble(
        &|xi: &[f64]| fwd.data(xi),
        basis.l,
        obs,
        cfg.ensemble.n_prior,
        &cfg.history_matching.lm,
        seed,
        false,
    )?;
    let report = HmReport::new(obs, window_end, &runs);
    Ok((hm::posterior_models(basis, &runs)?, report))
}
