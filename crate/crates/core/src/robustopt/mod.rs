//! Robust production optimization: NPV, realization trimming, constraint
//! aggregation and a filter-based particle swarm.

mod pso;

pub use pso::{filter_better, pso, update_particle, Evaluation, PsoConfig, PsoResult, SwarmObjective, TraceRow};

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ResultExt};
use crate::geostat::Geomodel;
use crate::proxy::ProxyModel;
use crate::resim::{self, BhpSchedule, FluidSpec, Numerics, RateSeries, WellSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EconParams {
    /// USD/STB
    pub oil_price: f64,
    /// USD/STB
    pub water_production_cost: f64,
    /// USD/STB
    pub water_injection_cost: f64,
    /// Per year.
    pub discount_rate: f64,
    pub stb_per_m3: f64,
}

impl Default for EconParams {
    fn default() -> Self {
        EconParams {
            oil_price: 74.0,
            water_production_cost: 5.0,
            water_injection_cost: 9.0,
            discount_rate: 0.1,
            stb_per_m3: 6.28981,
        }
    }
}

impl EconParams {
    pub fn validate(&self) -> Result<()> {
        let v = [
            self.oil_price,
            self.water_production_cost,
            self.water_injection_cost,
            self.discount_rate,
        ];
        if v.iter().any(|x| !(*x >= 0.0 && x.is_finite())) || !(self.stb_per_m3 > 0.0) {
            return Err(Error::invalid("prices, costs and discount rate must be >= 0"));
        }
        Ok(())
    }
}

/// Net present value in USD. The rate reported at `T_t` is held over
/// `[T_t, T_{t+1})` and discounted at the interval midpoint.
pub fn npv(r: &RateSeries, econ: &EconParams) -> f64 {
    let f = resim::field_rates(r);
    let mut total = 0.0;
    for t in 0..r.n_times().saturating_sub(1) {
        let (t0, t1) = (r.report_times[t], r.report_times[t + 1]);
        let cash = econ.oil_price * f.oil_production[t]
            - econ.water_production_cost * f.water_production[t]
            - econ.water_injection_cost * f.injection[t];
        let mid = 0.5 * (t0 + t1);
        total += cash * econ.stb_per_m3 * (t1 - t0) / (1.0 + econ.discount_rate).powf(mid / 365.0);
    }
    total
}

/// Number of realizations dropped at each end for a given ensemble size.
pub fn trim_count(n_r: usize, trim_fraction: f64) -> Result<usize> {
    let k = trim_fraction * n_r as f64;
    if n_r < 10 {
        return Err(Error::invalid(format!(
            "realization trimming needs n_r >= 10, got {n_r}"
        )));
    }
    if !(0.0..0.5).contains(&trim_fraction) || (k - k.round()).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "trim fraction {trim_fraction} x n_r {n_r} is not an integer"
        )));
    }
    Ok(k.round() as usize)
}

/// Drops the `k` lowest and `k` highest NPVs; ties are ordered by index, so
/// among equal values the lowest index goes first at the low end and the
/// highest index first at the high end. Returns kept indices ascending.
pub fn select_realizations(npvs: &[f64], k: usize) -> Result<Vec<usize>> {
    if npvs.len() <= 2 * k {
        return Err(Error::invalid("not enough realizations to trim"));
    }
    let mut order: Vec<usize> = (0..npvs.len()).collect();
    order.sort_by(|&a, &b| npvs[a].total_cmp(&npvs[b]).then(a.cmp(&b)));
    let mut kept = order[k..npvs.len() - k].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    WaterInjection,
    WaterProduction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSpec {
    /// `None` for a field-wide limit.
    #[serde(default)]
    pub well: Option<String>,
    pub phase: Phase,
    /// Maximum rate, m³/day.
    pub limit: f64,
}

impl ConstraintSpec {
    pub fn label(&self) -> String {
        let phase = match self.phase {
            Phase::WaterInjection => "water_injection",
            Phase::WaterProduction => "water_production",
        };
        format!("{}:{phase}", self.well.as_deref().unwrap_or("field"))
    }

    pub fn validate(&self, wells: &[WellSpec]) -> Result<()> {
        if !(self.limit > 0.0) {
            return Err(Error::invalid(format!(
                "constraint {} needs a positive limit",
                self.label()
            )));
        }
        if let Some(name) = &self.well {
            let w = wells
                .iter()
                .find(|w| &w.name == name)
                .ok_or_else(|| Error::invalid(format!("constraint refers to unknown well {name}")))?;
            let kind_ok = match self.phase {
                Phase::WaterInjection => w.kind == resim::WellKind::Injector,
                Phase::WaterProduction => w.kind == resim::WellKind::Producer,
            };
            if !kind_ok {
                return Err(Error::invalid(format!(
                    "constraint {} does not match the well kind",
                    self.label()
                )));
            }
        }
        Ok(())
    }

    /// Constrained quantity at every report time.
    pub fn series(&self, r: &RateSeries) -> Result<Vec<f64>> {
        let (names, rows) = match self.phase {
            Phase::WaterInjection => (&r.injector_names, &r.inj_water),
            Phase::WaterProduction => (&r.producer_names, &r.prod_water),
        };
        match &self.well {
            None => Ok((0..r.n_times()).map(|t| rows.iter().map(|w| w[t]).sum()).collect()),
            Some(name) => names
                .iter()
                .position(|n| n == name)
                .map(|i| rows[i].clone())
                .ok_or_else(|| Error::invalid(format!("well {name} not in rate series"))),
        }
    }

    /// Maximum of the constrained quantity over all report times.
    pub fn max_value(&self, r: &RateSeries) -> Result<f64> {
        Ok(self.series(r)?.into_iter().fold(f64::NEG_INFINITY, f64::max))
    }
}

/// Normalized violations for one constraint across the swarm.
///
/// `c[j]` is particle j's worst value over kept realizations and report times.
/// Returns `(c̄, M)` with `c̄ ∈ [0, 1]`.
pub fn normalized_violation(c: &[f64], limit: f64) -> Result<(Vec<f64>, f64)> {
    if c.is_empty() {
        return Err(Error::invalid("empty swarm"));
    }
    let m = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bars = c
        .iter()
        .map(|&cj| {
            if m <= limit || cj <= limit {
                0.0
            } else {
                ((cj - limit) / (m - limit)).clamp(0.0, 1.0)
            }
        })
        .collect();
    Ok((bars, m))
}

/// Aggregate violation `h` per particle given `c[j][l]` and the limits.
pub fn aggregate_violation(c: &[Vec<f64>], limits: &[f64]) -> Result<Vec<f64>> {
    if c.is_empty() {
        return Err(Error::invalid("empty swarm"));
    }
    let mut h = vec![0.0; c.len()];
    for (l, &limit) in limits.iter().enumerate() {
        let col: Vec<f64> = c.iter().map(|row| row[l]).collect();
        let (bars, _) = normalized_violation(&col, limit)?;
        for (hj, b) in h.iter_mut().zip(bars) {
            *hj += b;
        }
    }
    Ok(h)
}

/// Rates for a batch of schedules on every realization of an ensemble.
pub trait RateEvaluator: Sync {
    fn n_realizations(&self) -> usize;
    /// `out[p][s]`: rates for schedule p on realization s.
    fn evaluate(&self, schedules: &[BhpSchedule]) -> Result<Vec<Vec<RateSeries>>>;
}

pub struct SimulatorEvaluator<'a> {
    pub models: Vec<&'a Geomodel>,
    pub fluid: &'a FluidSpec,
    pub wells: &'a [WellSpec],
    pub numerics: &'a Numerics,
}

impl RateEvaluator for SimulatorEvaluator<'_> {
    fn n_realizations(&self) -> usize {
        self.models.len()
    }

    fn evaluate(&self, schedules: &[BhpSchedule]) -> Result<Vec<Vec<RateSeries>>> {
        let n = self.models.len();
        let flat: Result<Vec<RateSeries>> = (0..schedules.len() * n)
            .into_par_iter()
            .map(|k| {
                let (p, s) = (k / n, k % n);
                resim::simulate(self.models[s], self.fluid, self.wells, &schedules[p], self.numerics)
                    .context_with(|| format!("simulating schedule {p} on realization {s}"))
            })
            .collect();
        let mut flat = flat?.into_iter();
        Ok((0..schedules.len()).map(|_| flat.by_ref().take(n).collect()).collect())
    }
}

pub struct ProxyEvaluator<'a> {
    pub proxy: &'a ProxyModel,
    pub models: Vec<&'a Geomodel>,
}

impl RateEvaluator for ProxyEvaluator<'_> {
    fn n_realizations(&self) -> usize {
        self.models.len()
    }

    fn evaluate(&self, schedules: &[BhpSchedule]) -> Result<Vec<Vec<RateSeries>>> {
        let n = self.models.len();
        let scheds: Vec<&BhpSchedule> = schedules.iter().collect();
        let pairs: Vec<(usize, usize)> = (0..schedules.len()).flat_map(|p| (0..n).map(move |s| (s, p))).collect();
        let mut flat = self.proxy.predict(&self.models, &scheds, &pairs)?.into_iter();
        Ok((0..schedules.len()).map(|_| flat.by_ref().take(n).collect()).collect())
    }
}

/// Per-schedule robust statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustEval {
    pub npvs: Vec<f64>,
    pub kept: Vec<usize>,
    /// Negative mean NPV over kept realizations.
    pub j: f64,
    /// Per constraint, worst value over kept realizations and report times.
    pub c: Vec<f64>,
}

pub fn robust_eval(rates: &[RateSeries], econ: &EconParams, cs: &[ConstraintSpec], trim: usize) -> Result<RobustEval> {
    let npvs: Vec<f64> = rates.iter().map(|r| npv(r, econ)).collect();
    let kept = select_realizations(&npvs, trim)?;
    let j = -kept.iter().map(|&s| npvs[s]).sum::<f64>() / kept.len() as f64;
    let mut c = vec![f64::NEG_INFINITY; cs.len()];
    for &s in &kept {
        for (cl, spec) in c.iter_mut().zip(cs) {
            *cl = cl.max(spec.max_value(&rates[s])?);
        }
    }
    Ok(RobustEval { npvs, kept, j, c })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustConfig {
    pub pso: PsoConfig,
    /// Fraction of realizations dropped at each end of the NPV ranking.
    pub trim_fraction: f64,
}

impl Default for RobustConfig {
    fn default() -> Self {
        RobustConfig {
            pso: PsoConfig::default(),
            trim_fraction: 0.1,
        }
    }
}

struct RobustObjective<'a> {
    evaluator: &'a dyn RateEvaluator,
    econ: &'a EconParams,
    cs: &'a [ConstraintSpec],
    limits: Vec<f64>,
    prefix: &'a BhpSchedule,
    first_free: usize,
    trim: usize,
}

impl RobustObjective<'_> {
    fn schedule(&self, x: &[f64]) -> Result<BhpSchedule> {
        let mut u = self.prefix.clone();
        u.set_free_vector(self.first_free, x)?;
        Ok(u)
    }
}

impl SwarmObjective for RobustObjective<'_> {
    fn limits(&self) -> &[f64] {
        &self.limits
    }

    fn evaluate(&self, positions: &[Vec<f64>]) -> Result<Vec<Evaluation>> {
        let scheds: Result<Vec<BhpSchedule>> = positions.iter().map(|x| self.schedule(x)).collect();
        let rates = self.evaluator.evaluate(&scheds?)?;
        rates
            .iter()
            .map(|r| {
                let e = robust_eval(r, self.econ, self.cs, self.trim)?;
                Ok(Evaluation { j: e.j, c: e.c })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustResult {
    pub schedule: BhpSchedule,
    pub j: f64,
    pub h: f64,
    pub trace: Vec<TraceRow>,
    pub evaluations: usize,
}

/// Optimizes the control steps from `first_free` on; earlier steps keep the
/// values of `prefix`.
pub fn robust_optimize(
    evaluator: &dyn RateEvaluator,
    econ: &EconParams,
    cs: &[ConstraintSpec],
    prefix: &BhpSchedule,
    first_free: usize,
    cfg: &RobustConfig,
    seed: u64,
) -> Result<RobustResult> {
    econ.validate()?;
    prefix.validate()?;
    if first_free >= prefix.n_steps() {
        return Err(Error::invalid("no free control steps to optimize"));
    }
    let trim = trim_count(evaluator.n_realizations(), cfg.trim_fraction)?;
    let obj = RobustObjective {
        evaluator,
        econ,
        cs,
        limits: cs.iter().map(|c| c.limit).collect(),
        prefix,
        first_free,
        trim,
    };
    let bounds = prefix.free_bounds(first_free);
    let res = pso(&obj, &bounds, &cfg.pso, seed)?;
    Ok(RobustResult {
        schedule: obj.schedule(&res.best_x)?,
        j: res.best_j,
        h: res.best_h,
        trace: res.trace,
        evaluations: res.evaluations,
    })
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("iteration,best_J,best_h,swarm_mean_J,feasible_count\n");
    for r in trace {
        let _ = writeln!(
            out,
            "{},{:.10e},{:.10e},{:.10e},{}",
            r.iteration, r.best_j, r.best_h, r.swarm_mean_j, r.feasible_count
        );
    }
    out
}

pub fn write_trace_csv(trace: &[TraceRow], path: &Path) -> Result<()> {
    std::fs::write(path, trace_csv(trace)).map_err(|e| Error::io(path, e))
}

/// Orders two (J, h) pairs; `Less` means `a` is better.
pub fn filter_order(a: (f64, f64), b: (f64, f64)) -> Ordering {
    if filter_better(b, a) {
        Ordering::Greater
    } else if filter_better(a, b) {
        Ordering::Less
    } else {
        Ordering::Equal
    }
}
