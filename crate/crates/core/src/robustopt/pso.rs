use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Objective value and constraint quantities (`c[l] <= limit[l]`) of one position.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub j: f64,
    pub c: Vec<f64>,
}

pub trait SwarmObjective: Sync {
    fn limits(&self) -> &[f64];
    /// Evaluates every position of the swarm.
    fn evaluate(&self, positions: &[Vec<f64>]) -> Result<Vec<Evaluation>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsoConfig {
    pub n_swarm: usize,
    /// Number of swarm evaluations.
    pub n_iter: usize,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    /// Neighborhood size including the particle itself.
    pub neighborhood: usize,
}

impl Default for PsoConfig {
    fn default() -> Self {
        PsoConfig {
            n_swarm: 35,
            n_iter: 30,
            inertia: 0.729,
            cognitive: 1.494,
            social: 1.494,
            neighborhood: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub best_j: f64,
    pub best_h: f64,
    pub swarm_mean_j: f64,
    pub feasible_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsoResult {
    pub best_x: Vec<f64>,
    pub best_j: f64,
    pub best_h: f64,
    pub trace: Vec<TraceRow>,
    pub evaluations: usize,
}

/// True when `b` strictly beats the incumbent `a`: lower violation first,
/// then lower objective once both are feasible.
pub fn filter_better(a: (f64, f64), b: (f64, f64)) -> bool {
    let (ja, ha) = a;
    let (jb, hb) = b;
    match (ha == 0.0, hb == 0.0) {
        (true, true) => jb < ja,
        (true, false) => false,
        (false, true) => true,
        (false, false) => hb < ha,
    }
}

/// One velocity/position update for a single particle, clamping to bounds and
/// zeroing the velocity of clamped components.
#[allow(clippy::too_many_arguments)]
pub fn update_particle(
    x: &mut [f64],
    v: &mut [f64],
    p_best: &[f64],
    n_best: &[f64],
    r1: &[f64],
    r2: &[f64],
    bounds: &[(f64, f64)],
    cfg: &PsoConfig,
) {
    for d in 0..x.len() {
        v[d] =
            cfg.inertia * v[d] + cfg.cognitive * r1[d] * (p_best[d] - x[d]) + cfg.social * r2[d] * (n_best[d] - x[d]);
        x[d] += v[d];
        let (lo, hi) = bounds[d];
        if x[d] > hi {
            x[d] = hi;
            v[d] = 0.0;
        } else if x[d] < lo {
            x[d] = lo;
            v[d] = 0.0;
        }
    }
}

fn draw_topology(n: usize, size: usize, seed: u64, iteration: usize) -> Vec<Vec<usize>> {
    let mut rng = rng::stream(seed, &[rng::tag::PSO_TOPOLOGY, iteration as u64]);
    let others = size.saturating_sub(1).min(n - 1);
    (0..n)
        .map(|j| {
            let mut hood = vec![j];
            for k in sample(&mut rng, n - 1, others).into_iter() {
                hood.push(if k >= j { k + 1 } else { k });
            }
            hood
        })
        .collect()
}

/// Filter-based particle swarm minimizing `J` subject to the objective's
/// constraints over the box `bounds`.
pub fn pso(obj: &dyn SwarmObjective, bounds: &[(f64, f64)], cfg: &PsoConfig, seed: u64) -> Result<PsoResult> {
    let n = cfg.n_swarm;
    let dim = bounds.len();
    if n == 0 || cfg.n_iter == 0 || dim == 0 {
        return Err(Error::invalid("PSO needs a nonempty swarm, iterations and variables"));
    }
    if bounds.iter().any(|(lo, hi)| !(lo <= hi)) {
        return Err(Error::invalid("PSO bounds need lower <= upper"));
    }
    let mut xs: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            if j == 0 {
                bounds.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect()
            } else {
                let mut rng = rng::stream(seed, &[rng::tag::PSO_PARTICLE, u64::MAX, j as u64]);
                bounds
                    .iter()
                    .map(|&(lo, hi)| if hi > lo { rng.random_range(lo..=hi) } else { lo })
                    .collect()
            }
        })
        .collect();
    let mut vs = vec![vec![0.0; dim]; n];
    let mut p_x = xs.clone();
    let mut p_f = vec![(f64::INFINITY, f64::INFINITY); n];
    let mut best = (0usize, (f64::INFINITY, f64::INFINITY));
    let mut best_x = xs[0].clone();
    let mut topology = draw_topology(n, cfg.neighborhood, seed, 0);
    let mut trace = Vec::with_capacity(cfg.n_iter);
    let limits = obj.limits();

    for it in 0..cfg.n_iter {
        let evals = obj.evaluate(&xs)?;
        if evals.len() != n || evals.iter().any(|e| e.c.len() != limits.len()) {
            return Err(Error::shape("swarm evaluation", n, evals.len()));
        }
        if evals.iter().any(|e| !e.j.is_finite() || e.c.iter().any(|c| c.is_nan())) {
            return Err(Error::NonFinite(format!("objective at PSO iteration {it}")));
        }
        let c: Vec<Vec<f64>> = evals.iter().map(|e| e.c.clone()).collect();
        let h = super::aggregate_violation(&c, limits)?;
        let mut improved = false;
        for j in 0..n {
            let f = (evals[j].j, h[j]);
            if filter_better(p_f[j], f) {
                p_f[j] = f;
                p_x[j].clone_from(&xs[j]);
            }
            if filter_better(best.1, f) {
                best = (j, f);
                best_x.clone_from(&xs[j]);
                improved = true;
            }
        }
        trace.push(TraceRow {
            iteration: it + 1,
            best_j: best.1 .0,
            best_h: best.1 .1,
            swarm_mean_j: evals.iter().map(|e| e.j).sum::<f64>() / n as f64,
            feasible_count: h.iter().filter(|&&v| v == 0.0).count(),
        });
        if it + 1 == cfg.n_iter {
            break;
        }
        if !improved && it > 0 {
            topology = draw_topology(n, cfg.neighborhood, seed, it + 1);
        }
        for j in 0..n {
            let mut nb = topology[j][0];
            for &k in &topology[j][1..] {
                if filter_better(p_f[nb], p_f[k]) {
                    nb = k;
                }
            }
            let mut rng = rng::stream(seed, &[rng::tag::PSO_PARTICLE, it as u64, j as u64]);
            let r1: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
            let r2: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
            let n_best = p_x[nb].clone();
            update_particle(&mut xs[j], &mut vs[j], &p_x[j], &n_best, &r1, &r2, bounds, cfg);
        }
    }
    Ok(PsoResult {
        best_x,
        best_j: best.1 .0,
        best_h: best.1 .1,
        trace,
        evaluations: n * cfg.n_iter,
    })
}
