use clrm_core::geostat::{sample_realizations, Geomodel, GridSpec, HardData, VariogramKind, VariogramSpec};
use clrm_core::nn::Graph;
use clrm_core::proxy::{build_proxy, draw_schedule, BnMode, Normalization, ProxyConfig, ProxyModel};
use clrm_core::resim::{BhpSchedule, WellKind, WellSpec};
use rand::{Rng, SeedableRng};

pub use super::sim::well;

pub fn names(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

pub struct Fixture {
    pub models: Vec<Geomodel>,
    pub wells: Vec<WellSpec>,
    pub prefix: BhpSchedule,
    pub cfg: ProxyConfig,
}

pub fn fixture(n: usize, n_models: usize) -> Fixture {
    let grid = GridSpec::new(n, n, 8, 15.0, 15.0, 4.0).unwrap();
    let v = VariogramSpec {
        sill: 1.0,
        r_max: 60.0,
        r_mid: 30.0,
        r_min: 8.0,
        azimuth: 30.0,
        mean: 4.79,
        kind: VariogramKind::Spherical,
    };
    let models = sample_realizations(&grid, &v, &HardData::default(), n_models, 11).unwrap();
    let wells = vec![
        well("I1", WellKind::Injector, 1, 1, 8),
        well("P1", WellKind::Producer, n - 2, n - 2, 8),
    ];
    let bounds = [(325.0, 335.0), (300.0, 315.0)];
    let prefix = BhpSchedule::mid_bounds(5, 180.0, &bounds);
    let cfg = ProxyConfig::new([n, n, 8], 12, 31, names("I", 1), names("P", 1));
    Fixture {
        models,
        wells,
        prefix,
        cfg,
    }
}

pub fn with_norm(mut m: ProxyModel, bounds: &[(f64, f64)], n_out: usize) -> ProxyModel {
    m.norm = Some(Normalization {
        logk_mean: 4.79,
        logk_sd: 1.0,
        bhp_bounds: bounds.to_vec(),
        out_scale: vec![100.0; n_out],
    });
    m
}

/// Relative difference between analytic and central-difference gradients on
/// randomly chosen parameters of the composed network in training mode, on an
/// `n`×`n`×8 grid.
pub fn composed_gradient_error(n: usize, n_neu: usize, n_checks: usize, seed: u64) -> f64 {
    let f = fixture(n, 2);
    let mut cfg = f.cfg.clone();
    cfg.n_neu = n_neu;
    cfg.n_t = 7;
    let mut m = with_norm(build_proxy(&cfg, seed).unwrap(), &f.prefix.bounds, 3);
    let scheds: Vec<BhpSchedule> = (0..3).map(|j| draw_schedule(&f.prefix, 0, seed, 0, j)).collect();
    let mrefs: Vec<&Geomodel> = f.models.iter().collect();
    let srefs: Vec<&BhpSchedule> = scheds.iter().collect();
    let batch = m.batch(&mrefs, &srefs, &[(0, 0), (1, 1), (0, 2)]).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let len = 7 * 3 * 3;
    let target: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let weight: Vec<f64> = (0..len).map(|_| rng.random_range(0.5..1.5)).collect();
    let loss = |m: &ProxyModel| -> f64 {
        let mut g = Graph::new();
        let fw = m.forward_graph(&mut g, &batch, BnMode::Train, false).unwrap();
        let l = g.weighted_l1(fw.pred, target.clone(), weight.clone()).unwrap();
        g.value(l).data[0]
    };
    let mut g = Graph::new();
    let fw = m.forward_graph(&mut g, &batch, BnMode::Train, true).unwrap();
    let l = g.weighted_l1(fw.pred, target.clone(), weight.clone()).unwrap();
    g.backward(l).unwrap();
    let grads = g.param_grads(&m.store);
    let trainable: Vec<(usize, usize)> = m
        .store
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.trainable)
        .flat_map(|(i, e)| (0..e.value.len()).map(move |k| (i, k)))
        .collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..n_checks {
        let (i, k) = trainable[rng.random_range(0..trainable.len())];
        let x0 = m.store.entries[i].value[k];
        m.store.entries[i].value[k] = x0 + h;
        let lp = loss(&m);
        m.store.entries[i].value[k] = x0 - h;
        let lm = loss(&m);
        m.store.entries[i].value[k] = x0;
        let fd = (lp - lm) / (2.0 * h);
        let an = grads[i][k];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}
