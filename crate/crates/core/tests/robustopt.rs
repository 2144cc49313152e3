mod support;

use clrm_core::resim::{RateSeries, WellKind, WellSpec};
use clrm_core::robustopt::{
    aggregate_violation, filter_better, normalized_violation, npv, pso, robust_eval, select_realizations, trim_count,
    update_particle, ConstraintSpec, EconParams, Evaluation, Phase, PsoConfig, SwarmObjective,
};
use clrm_core::Result;
use proptest::prelude::*;
use support::swarm::*;

fn wells() -> Vec<WellSpec> {
    let mk = |name: &str, kind, i| WellSpec {
        name: name.into(),
        kind,
        i,
        j: 0,
        k_top: 0,
        k_bottom: 0,
        r_w: 0.1,
    };
    vec![
        mk("I1", WellKind::Injector, 0),
        mk("P1", WellKind::Producer, 1),
        mk("P2", WellKind::Producer, 2),
    ]
}

fn series(n_t: usize) -> RateSeries {
    RateSeries::zeros((0..n_t).map(|t| 30.0 * t as f64).collect(), &wells())
}

#[test]
fn npv_examples() {
    let econ = EconParams::default();
    assert_eq!(npv(&series(31), &econ), 0.0);

    let mut r = series(2);
    r.prod_oil[0][0] = 100.0;
    let flat = EconParams {
        discount_rate: 0.0,
        ..econ
    };
    assert!((npv(&r, &flat) - 1_396_337.82).abs() < 1e-6);

    let mut a = RateSeries::zeros(vec![350.0, 380.0], &wells());
    a.prod_oil[1][0] = 50.0;
    let ratio = npv(&a, &econ) / npv(&a, &flat);
    assert!((ratio - 1.0 / 1.1).abs() < 1e-14);

    let mut costs = series(2);
    costs.inj_water[0][0] = 10.0;
    costs.prod_water[1][0] = 10.0;
    let expect = -(9.0 + 5.0) * 10.0 * 6.28981 * 30.0;
    assert!((npv(&costs, &flat) - expect).abs() < 1e-6);
}

#[test]
fn realization_selection_examples() {
    let npvs: Vec<f64> = (1..=20).map(f64::from).collect();
    let k = trim_count(20, 0.1).unwrap();
    assert_eq!(k, 2);
    let kept = select_realizations(&npvs, k).unwrap();
    assert_eq!(kept, (2..18).collect::<Vec<_>>());

    let equal = vec![5.0; 20];
    assert_eq!(select_realizations(&equal, 2).unwrap(), (2..18).collect::<Vec<_>>());

    assert_eq!(trim_count(10, 0.1).unwrap(), 1);
    assert!(trim_count(9, 0.1).is_err());
    assert!(trim_count(15, 0.1).is_err());
}

#[test]
fn eq11_examples() {
    let (bars, m) = normalized_violation(&[90.0, 110.0, 120.0], 100.0).unwrap();
    assert_eq!(m, 120.0);
    assert_eq!(bars, vec![0.0, 0.5, 1.0]);
    let (bars, _) = normalized_violation(&[10.0, 20.0, 30.0], 100.0).unwrap();
    assert_eq!(bars, vec![0.0; 3]);
    assert!(normalized_violation(&[], 1.0).is_err());

    let h = aggregate_violation(&[vec![90.0, 5.0], vec![120.0, 12.0], vec![110.0, 11.0]], &[100.0, 10.0]).unwrap();
    assert_eq!(h, vec![0.0, 2.0, 1.0]);
}

#[test]
fn filter_examples() {
    assert!(!filter_better((-5.0, 0.0), (-9.0, 0.2)));
    assert!(filter_better((-5.0, 0.0), (-9.0, 0.0)));
    assert!(filter_better((-1.0, 0.3), (-8.0, 0.1)));
    assert!(!filter_better((-1.0, 0.3), (-1.0, 0.3)));
}

#[test]
fn velocity_rule_examples() {
    let cfg = PsoConfig::default();
    let (mut x, mut v) = (vec![0.0], vec![1.0]);
    update_particle(&mut x, &mut v, &[2.0], &[2.0], &[0.5], &[0.5], &[(-10.0, 10.0)], &cfg);
    assert!((v[0] - 3.717).abs() < 1e-12);
    assert!((x[0] - 3.717).abs() < 1e-12);

    let (mut x, mut v) = (vec![1.0], vec![0.0]);
    update_particle(&mut x, &mut v, &[1.0], &[1.0], &[0.3], &[0.9], &[(0.0, 2.0)], &cfg);
    assert_eq!((x[0], v[0]), (1.0, 0.0));

    let (mut x, mut v) = (vec![1.5], vec![2.0]);
    update_particle(&mut x, &mut v, &[1.5], &[1.5], &[0.0], &[0.0], &[(0.0, 2.0)], &cfg);
    assert_eq!((x[0], v[0]), (2.0, 0.0));
}

#[test]
fn constrained_quadratic_benchmark() {
    let mut js = Vec::new();
    let mut feasible = 0;
    for seed in 0..10 {
        let (j, h) = benchmark(seed);
        js.push(j);
        feasible += usize::from(h == 0.0);
    }
    js.sort_by(f64::total_cmp);
    let median = 0.5 * (js[4] + js[5]);
    assert!((median - 0.2).abs() < 1e-2, "median {median}, {js:?}");
    assert!(feasible >= 9);
}

#[test]
fn unconstrained_interior_optimum() {
    struct Shifted;
    impl SwarmObjective for Shifted {
        fn limits(&self) -> &[f64] {
            &[]
        }
        fn evaluate(&self, positions: &[Vec<f64>]) -> Result<Vec<Evaluation>> {
            Ok(positions
                .iter()
                .map(|x| Evaluation {
                    j: x.iter().map(|v| (v - 0.3) * (v - 0.3)).sum(),
                    c: vec![],
                })
                .collect())
        }
    }
    let mut errs: Vec<f64> = (0..10)
        .map(|s| {
            let r = pso(&Shifted, &[(-1.0, 1.0); 3], &PsoConfig::default(), s).unwrap();
            r.best_x.iter().map(|v| (v - 0.3).abs()).fold(0.0, f64::max)
        })
        .collect();
    errs.sort_by(f64::total_cmp);
    assert!(errs[5] < 1e-2, "{errs:?}");
}

#[test]
fn slack_constraints_reproduce_unconstrained_trajectory() {
    let free = Quadratic {
        limits: vec![],
        constrained: false,
    };
    let slack = Quadratic {
        limits: vec![1e9],
        constrained: true,
    };
    let a = pso(&free, &[(-1.0, 1.0); 4], &PsoConfig::default(), 3).unwrap();
    let b = pso(&slack, &[(-1.0, 1.0); 4], &PsoConfig::default(), 3).unwrap();
    assert_eq!(a.best_x, b.best_x);
    assert_eq!(a.trace, b.trace);
}

#[test]
fn best_so_far_is_monotone_and_within_bounds() {
    let obj = Quadratic {
        limits: vec![-1.0],
        constrained: true,
    };
    let bounds = [(-0.5, 1.0); 5];
    let r = pso(&obj, &bounds, &PsoConfig::default(), 17).unwrap();
    for w in r.trace.windows(2) {
        assert!(w[1].best_h <= w[0].best_h);
        if w[0].best_h == 0.0 {
            assert!(w[1].best_j <= w[0].best_j);
        }
    }
    assert!(r.best_x.iter().zip(&bounds).all(|(x, (lo, hi))| x >= lo && x <= hi));
    assert_eq!(r.evaluations, 35 * 30);
    assert_eq!(r.trace.len(), 30);
}

#[test]
fn robust_eval_trims_and_takes_worst_kept_constraint() {
    let mut rates = Vec::new();
    for s in 0..10 {
        let mut r = series(3);
        r.prod_oil[0] = vec![10.0 * (s + 1) as f64; 3];
        r.inj_water[0] = vec![100.0 + s as f64; 3];
        rates.push(r);
    }
    let cs = [ConstraintSpec {
        well: None,
        phase: Phase::WaterInjection,
        limit: 105.0,
    }];
    let e = robust_eval(&rates, &EconParams::default(), &cs, 1).unwrap();
    assert_eq!(e.kept, (1..9).collect::<Vec<_>>());
    assert_eq!(e.c, vec![108.0]);
    let mean = e.kept.iter().map(|&s| e.npvs[s]).sum::<f64>() / 8.0;
    assert_eq!(e.j, -mean);

    let well = ConstraintSpec {
        well: Some("P2".into()),
        phase: Phase::WaterProduction,
        limit: 1.0,
    };
    assert!(well.validate(&wells()).is_ok());
    let wrong = ConstraintSpec {
        well: Some("I1".into()),
        ..well.clone()
    };
    assert!(wrong.validate(&wells()).is_err());
}

proptest! {
    #[test]
    fn violations_are_normalized(c in prop::collection::vec(-100.0f64..100.0, 1..40), limit in -50.0f64..50.0) {
        let (bars, m) = normalized_violation(&c, limit).unwrap();
        for (b, cj) in bars.iter().zip(&c) {
            prop_assert!((0.0..=1.0).contains(b));
            prop_assert_eq!(*b == 0.0, *cj <= limit);
            if *cj == m && m > limit {
                prop_assert_eq!(*b, 1.0);
            }
        }
    }

    #[test]
    fn selection_depends_on_order_only(npvs in prop::collection::vec(-1e6f64..1e6, 10..30), scale in 0.001f64..1000.0) {
        let n = npvs.len() / 10 * 10;
        let npvs = &npvs[..n];
        let k = trim_count(n, 0.1).unwrap();
        let kept = select_realizations(npvs, k).unwrap();
        prop_assert_eq!(kept.len(), n - 2 * k);
        let scaled: Vec<f64> = npvs.iter().map(|v| v * scale).collect();
        prop_assert_eq!(select_realizations(&scaled, k).unwrap(), kept);
        prop_assert_eq!(
            filter_better((npvs[0], 0.0), (npvs[1], 0.0)),
            filter_better((npvs[0] * scale, 0.0), (npvs[1] * scale, 0.0))
        );
    }
}
