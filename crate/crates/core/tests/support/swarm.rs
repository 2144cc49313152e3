use clrm_core::robustopt::{pso, Evaluation, PsoConfig, SwarmObjective};
use clrm_core::Result;

pub struct Quadratic {
    pub limits: Vec<f64>,
    pub constrained: bool,
}

impl SwarmObjective for Quadratic {
    fn limits(&self) -> &[f64] {
        &self.limits
    }

    fn evaluate(&self, positions: &[Vec<f64>]) -> Result<Vec<Evaluation>> {
        Ok(positions
            .iter()
            .map(|x| Evaluation {
                j: x.iter().map(|v| v * v).sum(),
                // Σx >= 1 written as -Σx <= -1.
                c: if self.constrained {
                    vec![-x.iter().sum::<f64>()]
                } else {
                    vec![]
                },
            })
            .collect())
    }
}

/// Unit box: the update is per-dimension affine invariant, so this stands for
/// any BHP box mapped onto [0, 1].
pub fn benchmark(seed: u64) -> (f64, f64) {
    let obj = Quadratic {
        limits: vec![-1.0],
        constrained: true,
    };
    let r = pso(&obj, &[(0.0, 1.0); 5], &PsoConfig::default(), seed).unwrap();
    (r.best_j, r.best_h)
}
