use clrm_core::geostat::{sample_realizations, Geomodel, GridSpec, HardData, VariogramKind, VariogramSpec};
use clrm_core::resim::{BhpSchedule, FluidSpec, Numerics, RelPerm, Simulator, WellKind, WellSpec};

pub fn well(name: &str, kind: WellKind, i: usize, j: usize, nz: usize) -> WellSpec {
    WellSpec {
        name: name.into(),
        kind,
        i,
        j,
        k_top: 0,
        k_bottom: nz - 1,
        r_w: 0.1,
    }
}

pub fn unit_ratio_fluid() -> FluidSpec {
    FluidSpec {
        mu_o: 1.0,
        mu_w: 1.0,
        relperm: RelPerm {
            krw_end: 1.0,
            kro_end: 1.0,
            ..RelPerm::default()
        },
        ..FluidSpec::default()
    }
}

/// Welge tangent from the initial state: returns (S_front, f(S_front) / (S_front - S_init)).
pub fn welge(fluid: &FluidSpec) -> (f64, f64) {
    let s0 = fluid.sw_init;
    let mut best = (s0, 0.0);
    let n = 200_000;
    for i in 1..=n {
        let s = s0 + (1.0 - fluid.relperm.sor - s0) * i as f64 / n as f64;
        let slope = fluid.fractional_flow(s) / (s - s0);
        if slope > best.1 {
            best = (s, slope);
        }
    }
    best
}

/// Runs a 1D waterflood to `pvi` pore volumes injected; returns (front error / L, sw profile).
pub fn waterflood_front_error(nx: usize, pvi: f64) -> (f64, Vec<f64>) {
    let length = 400.0;
    let dx = length / nx as f64;
    let grid = GridSpec::new(nx, 1, 1, dx, 10.0, 10.0).unwrap();
    let model = Geomodel::homogeneous(grid, 100f64.ln());
    let fluid = unit_ratio_fluid();
    let wells = vec![
        well("I", WellKind::Injector, 0, 0, 1),
        well("P", WellKind::Producer, nx - 1, 0, 1),
    ];
    let sim = Simulator::new(&model, &fluid, &wells, &Numerics::default()).unwrap();
    let pv = sim.total_pore_volume();
    let mut state = sim.initial_state();
    let target = pvi * pv;
    while state.cum_water_injected < target * (1.0 - 1e-12) {
        let flow = sim.solve(&mut state, &[330.0, 300.0]).unwrap();
        let q = flow.total_injection(&sim);
        let remaining = target - state.cum_water_injected;
        let dt = (remaining / q).min(0.005 * pv / q);
        sim.transport(&mut state, &flow, dt).unwrap();
    }
    assert!((state.cum_water_injected - target).abs() < 1e-6 * target);

    let s0 = fluid.sw_init;
    let (s_front, slope) = welge(&fluid);
    let x_analytic = pvi * length * slope;
    let level = 0.5 * (s0 + s_front);
    let sw = state.sw.clone();
    let centers: Vec<f64> = (0..nx).map(|i| (i as f64 + 0.5) * dx).collect();
    let mut x_num = None;
    for i in 0..nx - 1 {
        if sw[i] >= level && sw[i + 1] < level {
            let w = (sw[i] - level) / (sw[i] - sw[i + 1]);
            x_num = Some(centers[i] + w * dx);
            break;
        }
    }
    let x_num = x_num.expect("front inside the domain");
    ((x_num - x_analytic).abs() / length, sw)
}

pub fn heterogeneous_case(seed: u64) -> (Geomodel, Vec<WellSpec>, BhpSchedule) {
    let grid = GridSpec::new(10, 10, 3, 15.0, 15.0, 4.0).unwrap();
    let v = VariogramSpec {
        sill: 2.25,
        r_max: 100.0,
        r_mid: 40.0,
        r_min: 8.0,
        azimuth: 30.0,
        mean: 4.79,
        kind: VariogramKind::Spherical,
    };
    let model = sample_realizations(&grid, &v, &HardData::default(), 1, seed)
        .unwrap()
        .pop()
        .unwrap();
    let wells = vec![
        well("I1", WellKind::Injector, 1, 1, 3),
        well("I2", WellKind::Injector, 8, 8, 3),
        well("P1", WellKind::Producer, 1, 8, 3),
        well("P2", WellKind::Producer, 8, 1, 3),
    ];
    let bounds = [(325.0, 335.0), (325.0, 335.0), (300.0, 315.0), (300.0, 315.0)];
    let mut u = BhpSchedule::mid_bounds(5, 180.0, &bounds);
    u.bhp[0] = vec![335.0, 325.0, 330.0, 333.0, 326.0];
    u.bhp[3] = vec![300.0, 315.0, 310.0, 301.0, 314.0];
    (model, wells, u)
}
