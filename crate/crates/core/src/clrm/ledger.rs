use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

/// Simulation counts of a closed-loop run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    pub initial_training_sims: usize,
    pub initial_test_sims: usize,
    /// One entry per retraining (cycles 2..).
    pub retraining_sims: Vec<usize>,
    pub retraining_test_sims: Vec<usize>,
    pub hm_sims: Vec<usize>,
    /// Simulator passes over the ensemble at each reported optimum.
    pub validation_sims: usize,
    pub truth_sims: usize,
    /// Schedules scored by the proxy during optimization.
    pub proxy_schedule_evaluations: usize,
    pub report: Option<LedgerReport>,
}

impl Ledger {
    pub fn new(_cfg: &RunConfig) -> Self {
        Ledger {
            initial_training_sims: 0,
            initial_test_sims: 0,
            retraining_sims: Vec::new(),
            retraining_test_sims: Vec::new(),
            hm_sims: Vec::new(),
            validation_sims: 0,
            truth_sims: 0,
            proxy_schedule_evaluations: 0,
            report: None,
        }
    }

    pub fn finish(mut self, cfg: &RunConfig) -> Self {
        let training: Vec<usize> = std::iter::once(self.initial_training_sims)
            .chain(self.retraining_sims.iter().copied())
            .collect();
        let hm_total: usize = self.hm_sims.iter().sum();
        let hm_formula = if self.hm_sims.is_empty() {
            "0".into()
        } else {
            format!(
                "{} = {}",
                self.hm_sims
                    .iter()
                    .map(|&v| format_count(v as f64))
                    .collect::<Vec<_>>()
                    .join(" + "),
                format_count(hm_total as f64)
            )
        };
        let training_total: usize = training.iter().sum();
        let training_formula = format!(
            "{} = {}",
            training
                .iter()
                .map(|&v| format_count(v as f64))
                .collect::<Vec<_>>()
                .join(" + "),
            format_count(training_total as f64)
        );
        self.report = Some(LedgerReport::new(
            cfg,
            cfg.clrm.n_cycles,
            training_total as f64,
            training_formula,
            hm_total as f64,
            hm_formula,
        ));
        self
    }
}

/// Proxy-based cost against the simulation-based counterfactual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerReport {
    pub proxy_training_sims: f64,
    pub proxy_training_formula: String,
    pub counterfactual_optimization_sims: f64,
    pub counterfactual_formula: String,
    pub hm_sims: f64,
    pub hm_formula: String,
    pub optimization_ratio: f64,
    pub proxy_total: f64,
    pub counterfactual_total: f64,
    pub total_ratio: f64,
}

impl LedgerReport {
    fn new(
        cfg: &RunConfig,
        n_cycles: usize,
        training: f64,
        training_formula: String,
        hm: f64,
        hm_formula: String,
    ) -> Self {
        let pso = &cfg.optimization.pso;
        let n_r = cfg.ensemble.n_prior;
        let counterfactual = (n_cycles * pso.n_swarm * pso.n_iter * n_r) as f64;
        let counterfactual_formula = format!(
            "{} × {} × {} × {} = {}",
            n_cycles,
            pso.n_swarm,
            pso.n_iter,
            n_r,
            format_count(counterfactual)
        );
        LedgerReport {
            proxy_training_sims: training,
            proxy_training_formula: training_formula,
            counterfactual_optimization_sims: counterfactual,
            counterfactual_formula,
            hm_sims: hm,
            hm_formula,
            optimization_ratio: counterfactual / training,
            proxy_total: training + hm,
            counterfactual_total: counterfactual + hm,
            total_ratio: (counterfactual + hm) / (training + hm),
        }
    }

    pub fn lines(&self) -> Vec<String> {
        vec![
            format!("proxy training simulations: {}", self.proxy_training_formula),
            format!(
                "simulation-based optimization (counterfactual): {}",
                self.counterfactual_formula
            ),
            format!("optimization speedup: {:.2}", self.optimization_ratio),
            format!("history-matching simulations: {}", self.hm_formula),
            format!(
                "total: {} / {} = {:.2}",
                format_count(self.counterfactual_total),
                format_count(self.proxy_total),
                self.total_ratio
            ),
        ]
    }
}

/// Ledger implied by the configuration, with `reference_hm_sims_per_run`
/// standing in for the cost of each RML run.
pub fn planned_ledger(cfg: &RunConfig) -> LedgerReport {
    let n_r = cfg.ensemble.n_prior;
    let n_cyc = cfg.clrm.n_cycles;
    let initial = n_r * cfg.proxy.n_train_per_model;
    let retrain = n_r * cfg.proxy.retrain_train_per_model;
    let assim = n_cyc - 1;
    let training = (initial + retrain * assim) as f64;
    let training_formula = if assim == 0 {
        format_count(training)
    } else {
        format!(
            "{} + {} × {} = {}",
            format_count(initial as f64),
            format_count(retrain as f64),
            assim,
            format_count(training)
        )
    };
    let per_run = cfg.clrm.reference_hm_sims_per_run;
    let hm = assim as f64 * n_r as f64 * per_run;
    let hm_formula = format!("{} × {} × {} = {}", assim, n_r, format_count(per_run), format_count(hm));
    LedgerReport::new(cfg, n_cyc, training, training_formula, hm, hm_formula)
}

/// Thousands-separated count; non-integers keep two decimals.
pub fn format_count(v: f64) -> String {
    if v.fract() != 0.0 || !v.is_finite() {
        return format!("{v:.2}");
    }
    let digits = format!("{}", v.abs() as u128);
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    if v < 0.0 {
        format!("-{out}")
    } else {
        out
    }
}
