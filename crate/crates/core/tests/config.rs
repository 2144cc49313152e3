use clrm_core::clrm::{format_count, planned_ledger};
use clrm_core::config::{load_config, Profile, RunConfig, Source};
use clrm_core::resim::WellKind;
use proptest::prelude::*;

fn no_env() -> Vec<(String, String)> {
    Vec::new()
}

#[test]
fn paper_profile_constants() {
    let c = RunConfig::profile(Profile::Paper);
    c.validate().unwrap();
    assert_eq!((c.grid.nx, c.grid.ny, c.grid.nz), (40, 40, 8));
    assert_eq!((c.grid.dx, c.grid.dy, c.grid.dz), (15.0, 15.0, 4.0));
    assert_eq!(c.controls.injector_bounds, (325.0, 335.0));
    assert_eq!(c.controls.producer_bounds, (300.0, 315.0));
    assert_eq!(c.fluid.porosity, 0.2);
    let e = &c.economics;
    assert_eq!(
        (
            e.oil_price,
            e.water_injection_cost,
            e.water_production_cost,
            e.discount_rate
        ),
        (74.0, 9.0, 5.0, 0.1)
    );
    let limits: Vec<f64> = c.constraints.iter().map(|c| c.limit).collect();
    assert_eq!(limits, vec![1400.0, 1100.0, 1100.0, 1100.0, 1100.0]);
    assert_eq!((c.optimization.pso.n_swarm, c.optimization.pso.n_iter), (35, 30));
    assert_eq!(c.proxy.n_neu, 200);
    assert_eq!(c.n_t(), 31);
    assert_eq!(c.wells.iter().filter(|w| w.kind == WellKind::Injector).count(), 3);
    assert_eq!(c.wells.iter().filter(|w| w.kind == WellKind::Producer).count(), 4);
    let pc = c.proxy_config();
    assert_eq!((pc.n_in(), pc.n_out()), (7, 11));
    assert_eq!(pc.closed_form_param_count(), 333_523);
}

#[test]
fn desk_profile_is_valid() {
    let c = RunConfig::profile(Profile::Desk);
    c.validate().unwrap();
    assert_eq!((c.grid.nx, c.grid.ny), (20, 20));
    assert_eq!(c.proxy_config().cnn_dims(), [24, 24, 8]);
    assert_eq!(c.clrm.n_cycles, 3);
    assert!(c.ensemble.max_latent.unwrap() <= 32);
}

#[test]
fn toml_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for p in [Profile::Paper, Profile::Desk] {
        let c = RunConfig::profile(p);
        let path = dir.path().join("c.toml");
        c.save(&path).unwrap();
        let loaded = load_config(Some(&path), None, no_env()).unwrap();
        assert_eq!(loaded.config, c);
        assert!(loaded.sources.values().all(|s| *s == Source::File));
    }
}

#[test]
fn file_and_env_overrides_with_sources() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(
        &path,
        "profile = \"paper\"\nseed = 9\n[optimization.pso]\nn_swarm = 10\n",
    )
    .unwrap();
    let env = vec![
        ("CLRM_OPTIMIZATION__PSO__N_ITER".to_string(), "7".to_string()),
        ("CLRM_SEED".to_string(), "11".to_string()),
        ("OTHER".to_string(), "x".to_string()),
    ];
    let l = load_config(Some(&path), None, env).unwrap();
    assert_eq!(l.config.profile, Profile::Paper);
    assert_eq!(l.config.optimization.pso.n_swarm, 10);
    assert_eq!(l.config.optimization.pso.n_iter, 7);
    assert_eq!(l.config.seed, 11);
    assert_eq!(l.sources["optimization.pso.n_swarm"], Source::File);
    assert_eq!(l.sources["optimization.pso.n_iter"], Source::Env);
    assert_eq!(l.sources["grid.nx"], Source::PaperDefault);

    let l = load_config(Some(&path), Some(Profile::Desk), no_env()).unwrap();
    assert_eq!(l.config.grid.nx, 20);
    assert_eq!(l.sources["grid.nx"], Source::DeskDefault);

    let l = load_config(None, None, vec![("CLRM_PROFILE".into(), "paper".into())]).unwrap();
    assert_eq!(l.config.grid.nx, 40);
}

#[test]
fn schema_violations_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    for bad in [
        "schema_version = 2\n",
        "unknown_key = 1\n",
        "[grid]\nnx = \"wide\"\n",
        "[ensemble]\nn_prior = 15\n",
        "[clrm]\nn_cycles = 9\n",
        "profile = \"huge\"\n",
    ] {
        std::fs::write(&path, bad).unwrap();
        let e = load_config(Some(&path), None, no_env()).unwrap_err();
        assert!(e.is_config(), "{bad}: {e}");
    }
    let e = load_config(None, None, vec![("CLRM_A____B".into(), "1".into())]).unwrap_err();
    assert!(e.is_config());
}

#[test]
fn paper_profile_ledger_arithmetic() {
    let c = RunConfig::profile(Profile::Paper);
    let r = planned_ledger(&c);
    assert_eq!(r.proxy_training_sims, 1100.0);
    assert_eq!(r.counterfactual_optimization_sims, 105_000.0);
    assert_eq!(r.hm_sims, 8800.0);
    assert_eq!(r.counterfactual_total, 113_800.0);
    assert_eq!(r.proxy_total, 9900.0);
    assert_eq!(format!("{:.2}", r.total_ratio), "11.49");
    assert_eq!(format!("{:.2}", r.optimization_ratio), "95.45");
    let lines = r.lines();
    assert_eq!(lines[0], "proxy training simulations: 300 + 200 × 4 = 1,100");
    assert_eq!(
        lines[1],
        "simulation-based optimization (counterfactual): 5 × 35 × 30 × 20 = 105,000"
    );
    assert_eq!(lines[4], "total: 113,800 / 9,900 = 11.49");

    let mut zero = c.clone();
    zero.clrm.reference_hm_sims_per_run = 0.0;
    assert_eq!(format!("{:.2}", planned_ledger(&zero).total_ratio), "95.45");

    let mut one = c;
    one.clrm.n_cycles = 1;
    let r = planned_ledger(&one);
    assert_eq!(r.proxy_training_sims, 300.0);
    assert_eq!(r.hm_sims, 0.0);
}

#[test]
fn count_formatting() {
    assert_eq!(format_count(0.0), "0");
    assert_eq!(format_count(999.0), "999");
    assert_eq!(format_count(1000.0), "1,000");
    assert_eq!(format_count(105_000.0), "105,000");
    assert_eq!(format_count(1_234_567.0), "1,234,567");
    assert_eq!(format_count(2.5), "2.50");
}

proptest! {
    #[test]
    fn ledger_follows_config(
        n_r in prop::sample::select(vec![10usize, 20, 30]),
        n_cyc in 1usize..=5,
        n_s in 1usize..50,
        n_i in 1usize..50,
        n_train in 1usize..30,
        n_retrain in 1usize..30,
        per_run in 0.0f64..500.0,
    ) {
        let mut c = RunConfig::profile(Profile::Paper);
        c.ensemble.n_prior = n_r;
        c.clrm.n_cycles = n_cyc;
        c.optimization.pso.n_swarm = n_s;
        c.optimization.pso.n_iter = n_i;
        c.proxy.n_train_per_model = n_train;
        c.proxy.retrain_train_per_model = n_retrain;
        c.clrm.reference_hm_sims_per_run = per_run;
        let r = planned_ledger(&c);
        let train = (n_r * n_train + (n_cyc - 1) * n_r * n_retrain) as f64;
        let cf = (n_cyc * n_s * n_i * n_r) as f64;
        let hm = (n_cyc - 1) as f64 * n_r as f64 * per_run;
        prop_assert_eq!(r.proxy_training_sims, train);
        prop_assert_eq!(r.counterfactual_optimization_sims, cf);
        prop_assert_eq!(r.hm_sims, hm);
        prop_assert_eq!(r.total_ratio, (cf + hm) / (train + hm));
    }
}
