mod support;

use clrm_core::hm::{
    data_mismatch, extract_data, observation_times, perturb_observations, rml_ensemble, rml_objective, rml_sample,
    LmConfig, NoiseSpec, ObservationSet,
};
use clrm_core::resim::{RateSeries, WellKind, WellSpec};
use clrm_core::rng;
use clrm_core::Result;
use nalgebra::DVector;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use support::rml::*;

fn well(name: &str, kind: WellKind, i: usize) -> WellSpec {
    WellSpec {
        name: name.into(),
        kind,
        i,
        j: 0,
        k_top: 0,
        k_bottom: 0,
        r_w: 0.1,
    }
}

fn seven_wells() -> Vec<WellSpec> {
    let mut w = Vec::new();
    for (n, name) in ["I1", "I2", "I3"].iter().enumerate() {
        w.push(well(name, WellKind::Injector, n));
    }
    for (n, name) in ["P1", "P2", "P3", "P4"].iter().enumerate() {
        w.push(well(name, WellKind::Producer, 3 + n));
    }
    w
}

#[test]
fn objective_examples() {
    assert_eq!(
        rml_objective(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 1.0], &[0.3], &[0.3]),
        0.0
    );
    assert_eq!(rml_objective(&[1.0], &[1.0], &[1.0], &[1.0, 0.0], &[0.0, 0.0]), 1.0);
    assert_eq!(rml_objective(&[4.0], &[1.0], &[1.0], &[0.0], &[0.0]), 9.0);
}

#[test]
fn observation_counts_per_window() {
    let wells = seven_wells();
    let times: Vec<f64> = (0..=30).map(|t| 30.0 * t as f64).collect();
    let r = RateSeries::zeros(times, &wells);
    for (c, expect) in [(1, 22), (2, 44), (3, 66), (4, 88)] {
        let obs_t = observation_times(180.0 * c as f64, 90.0);
        let (d, labels) = extract_data(&r, &wells, &obs_t).unwrap();
        assert_eq!(d.len(), expect);
        assert_eq!(labels.len(), expect);
    }
    let (_, labels) = extract_data(&r, &wells, &observation_times(180.0, 90.0)).unwrap();
    assert_eq!(labels[0], "I1:water_inj@90");
    assert_eq!(labels[1], "I1:water_inj@180");
    assert_eq!(labels[6], "P1:oil_prod@90");
    assert_eq!(labels[8], "P1:water_prod@90");
    assert!(extract_data(&r, &wells, &[45.0]).is_err());
}

#[test]
fn noise_model() {
    let n = NoiseSpec::default();
    assert_eq!(n.sd(100.0), 2.0);
    assert_eq!(n.sd(0.0), 0.5);
    assert_eq!(n.sd(-10.0), 0.5);

    let d = vec![100.0; 20_000];
    let obs = perturb_observations(&d, vec![String::new(); d.len()], vec![], &n, 1.0, 5);
    let mean = obs.values.iter().sum::<f64>() / d.len() as f64;
    let var = obs.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
    assert!((mean - 100.0).abs() < 0.05, "{mean}");
    assert!((var.sqrt() - 2.0).abs() < 0.05, "{}", var.sqrt());

    let exact = perturb_observations(&d[..10], vec![String::new(); 10], vec![], &n, 0.0, 5);
    assert_eq!(exact.values, d[..10]);
}

#[test]
fn linear_forward_hits_closed_form_minimizer() {
    let (nd, l) = (22, 10);
    let lin = Linear::new(nd, l, 1);
    let mut r = rng::stream(2, &[]);
    let xi_star: Vec<f64> = (0..l).map(|_| r.sample(StandardNormal)).collect();
    let d_star: Vec<f64> = (0..nd).map(|_| 5.0 * r.sample::<f64, _>(StandardNormal)).collect();
    let sd: Vec<f64> = (0..nd).map(|i| 0.5 + 0.1 * i as f64).collect();
    let out = rml_sample(
        &|x: &[f64]| lin.forward(x),
        &xi_star,
        &d_star,
        &sd,
        &LmConfig::default(),
    )
    .unwrap();

    let (m, cov) = lin.posterior(&sd);
    let expect = m * DVector::from_column_slice(&d_star) + &cov * DVector::from_column_slice(&xi_star);
    let err = out
        .xi
        .iter()
        .zip(expect.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-6, "max error {err}");
    assert!(!out.degraded);
    for w in out.objective_history.windows(2) {
        assert!(w[1] < w[0]);
    }
    assert_eq!(
        out.simulations,
        1 + out.iterations * l + out.objective_history.len() - 1
    );
}

#[test]
fn zero_information_returns_prior_draw() {
    let lin = Linear::new(6, 4, 3);
    let xi_star = [0.3, -1.2, 0.7, 2.0];
    let d_star = [10.0; 6];
    let sd = [1e12; 6];
    let out = rml_sample(
        &|x: &[f64]| lin.forward(x),
        &xi_star,
        &d_star,
        &sd,
        &LmConfig::default(),
    )
    .unwrap();
    for (a, b) in out.xi.iter().zip(&xi_star) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn flat_objective_is_flagged_degraded() {
    // Forward model with a constant output: the start is already optimal.
    let out = rml_sample(
        &|_: &[f64]| Ok(vec![1.0, 2.0]),
        &[0.0, 0.0],
        &[1.0, 2.0],
        &[1.0, 1.0],
        &LmConfig::default(),
    )
    .unwrap();
    assert!(out.degraded);
    assert_eq!(out.objective_history, vec![0.0]);
    assert_eq!(out.xi, vec![0.0, 0.0]);
}

#[test]
fn nonlinear_history_is_strictly_decreasing() {
    let lin = Linear::new(8, 3, 4);
    let fwd = |x: &[f64]| -> Result<Vec<f64>> { Ok(lin.forward(x)?.iter().map(|v| v.exp() + v * v * v).collect()) };
    let out = rml_sample(
        &fwd,
        &[0.1, 0.2, -0.3],
        &[3.0, 1.0, 2.0, 0.5, 4.0, 1.5, 2.5, 0.2],
        &[0.5; 8],
        &LmConfig::default(),
    )
    .unwrap();
    assert!(out.objective_history.len() > 1);
    for w in out.objective_history.windows(2) {
        assert!(w[1] < w[0]);
    }
    assert!(out.mismatch_final < out.mismatch_initial);
}

#[test]
fn linear_gaussian_posterior_moments() {
    let (dm, dv) = linear_gaussian_errors(11, true);
    assert!(dm <= 0.05, "mean error {dm}");
    assert!(dv <= 0.15, "variance error {dv}");
}

#[test]
fn ensemble_is_reproducible() {
    let lin = Linear::new(5, 3, 8);
    let obs = ObservationSet {
        times: vec![],
        labels: vec![String::new(); 5],
        values: vec![1.0, 2.0, 3.0, 4.0, 5.0],
        sd: vec![0.5; 5],
    };
    let f = |x: &[f64]| lin.forward(x);
    let a = rml_ensemble(&f, 3, &obs, 6, &LmConfig::default(), 4, false).unwrap();
    let b = rml_ensemble(&f, 3, &obs, 6, &LmConfig::default(), 4, false).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 6);
    assert!(a.iter().all(|r| r.outcome.mismatch_final <= r.outcome.mismatch_initial));
    let c = rml_ensemble(&f, 3, &obs, 6, &LmConfig::default(), 5, false).unwrap();
    assert_ne!(a[0].xi_star, c[0].xi_star);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn objective_is_nonnegative_and_separates(
        d in prop::collection::vec(-50.0f64..50.0, 4),
        ds in prop::collection::vec(-50.0f64..50.0, 4),
        xi in prop::collection::vec(-3.0f64..3.0, 3),
        xs in prop::collection::vec(-3.0f64..3.0, 3),
    ) {
        let sd = [0.5, 1.0, 2.0, 4.0];
        let f = rml_objective(&d, &ds, &sd, &xi, &xs);
        prop_assert!(f >= 0.0);
        let reg: f64 = xi.iter().zip(&xs).map(|(a, b)| (a - b).powi(2)).sum();
        prop_assert!((f - data_mismatch(&d, &ds, &sd) - reg).abs() < 1e-9 * (1.0 + f));
    }

    #[test]
    fn accepted_steps_decrease_objective(seed in 0u64..1000) {
        let lin = Linear::new(6, 3, seed);
        let fwd = |x: &[f64]| -> Result<Vec<f64>> { Ok(lin.forward(x)?.iter().map(|v| v.tanh() * 10.0).collect()) };
        let out = rml_sample(&fwd, &[0.0; 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 4.0], &[0.5; 6], &LmConfig::default()).unwrap();
        for w in out.objective_history.windows(2) {
            prop_assert!(w[1] < w[0]);
        }
    }
}
