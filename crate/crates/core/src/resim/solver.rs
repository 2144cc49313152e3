use crate::error::{Error, Result};
use crate::geostat::{Geomodel, GridSpec};

use super::{
    well_index, BhpSchedule, FluidSpec, Numerics, RateSeries, WellKind, WellSpec, BAR_TO_PA, CP_TO_PA_S, DAY_TO_S,
    MD_TO_M2,
};

const SAT_TOL: f64 = 1e-9;
const MAX_SHUT_IN_PASSES: usize = 64;

#[derive(Debug, Clone, Copy)]
struct Perf {
    cell: usize,
    /// m³
    wi: f64,
}

/// Precomputed geometry and well connections for one geomodel.
#[derive(Debug, Clone)]
pub struct Simulator {
    grid: GridSpec,
    fluid: FluidSpec,
    numerics: Numerics,
    wells: Vec<WellSpec>,
    pore_volume: Vec<f64>,
    faces: Vec<(usize, usize)>,
    /// Cell adjacency in CSR form: neighbor and face index per entry.
    adj_start: Vec<usize>,
    adj_nbr: Vec<u32>,
    adj_face: Vec<u32>,
    /// m³ (permeability times area over distance)
    trans: Vec<f64>,
    perfs: Vec<Vec<Perf>>,
    /// Lipschitz bound of the fractional-flow curve.
    fw_slope: f64,
    sat_floor: f64,
}

/// Dynamic state: water saturation and pressure (Pa).
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub sw: Vec<f64>,
    pub pressure: Vec<f64>,
    pub time_days: f64,
    /// Cumulative volumes (m³).
    pub cum_water_injected: f64,
    pub cum_oil_produced: f64,
    pub cum_water_produced: f64,
}

/// Result of one pressure solve.
#[derive(Debug, Clone)]
pub struct Flow {
    /// Total volumetric flux (m³/s) across each face, positive from the first to the second cell.
    face_flux: Vec<f64>,
    /// Per well, per perforation (m³/s), positive in the well's own direction.
    perf_rate: Vec<Vec<f64>>,
    /// |injection - production| / injection.
    pub imbalance: f64,
    pub cg_iterations: usize,
    pub shut_in_perforations: usize,
}

impl Flow {
    pub fn total_injection(&self, sim: &Simulator) -> f64 {
        sim.wells
            .iter()
            .zip(&self.perf_rate)
            .filter(|(w, _)| w.kind == WellKind::Injector)
            .map(|(_, q)| q.iter().sum::<f64>())
            .sum::<f64>()
            * DAY_TO_S
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub rates: RateSeries,
    pub final_state: SimState,
    pub max_imbalance: f64,
    pub pressure_solves: usize,
}

impl Simulator {
    pub fn new(m: &Geomodel, fluid: &FluidSpec, wells: &[WellSpec], numerics: &Numerics) -> Result<Self> {
        fluid.validate()?;
        numerics.validate()?;
        super::validate_wells(wells, &m.grid)?;
        let g = m.grid;
        let perm: Vec<f64> = m.logk.iter().map(|l| l.exp()).collect();
        if perm.iter().any(|k| !(k.is_finite() && *k > 0.0)) {
            return Err(Error::NonFinite("permeability field".into()));
        }
        let pore_volume = vec![fluid.porosity * g.cell_volume(); g.n_cells()];

        let mut faces = Vec::with_capacity(3 * g.n_cells());
        let mut trans = Vec::with_capacity(3 * g.n_cells());
        let harmonic = |ka: f64, kb: f64, area: f64, len: f64| 2.0 * area * ka * kb / (len * (ka + kb));
        for k in 0..g.nz {
            for j in 0..g.ny {
                for i in 0..g.nx {
                    let a = g.index(i, j, k);
                    let ka = perm[a] * MD_TO_M2;
                    if i + 1 < g.nx {
                        let b = g.index(i + 1, j, k);
                        faces.push((a, b));
                        trans.push(harmonic(ka, perm[b] * MD_TO_M2, g.dy * g.dz, g.dx));
                    }
                    if j + 1 < g.ny {
                        let b = g.index(i, j + 1, k);
                        faces.push((a, b));
                        trans.push(harmonic(ka, perm[b] * MD_TO_M2, g.dx * g.dz, g.dy));
                    }
                    if k + 1 < g.nz {
                        let b = g.index(i, j, k + 1);
                        faces.push((a, b));
                        trans.push(harmonic(ka, perm[b] * MD_TO_M2, g.dx * g.dy, g.dz));
                    }
                }
            }
        }

        let mut lists: Vec<Vec<(u32, u32)>> = vec![Vec::new(); g.n_cells()];
        for (f, &(a, b)) in faces.iter().enumerate() {
            lists[a].push((b as u32, f as u32));
            lists[b].push((a as u32, f as u32));
        }
        let mut adj_start = vec![0];
        let (mut adj_nbr, mut adj_face) = (Vec::new(), Vec::new());
        for l in &mut lists {
            l.sort_unstable();
            for &(nb, f) in l.iter() {
                adj_nbr.push(nb);
                adj_face.push(f);
            }
            adj_start.push(adj_nbr.len());
        }

        let mut perfs = Vec::with_capacity(wells.len());
        for w in wells {
            let list = w
                .cells(&g)
                .into_iter()
                .map(|cell| {
                    Ok(Perf {
                        cell,
                        wi: well_index(&g, perm[cell], w.r_w)? * MD_TO_M2,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            perfs.push(list);
        }

        Ok(Simulator {
            grid: g,
            fluid: *fluid,
            numerics: *numerics,
            wells: wells.to_vec(),
            pore_volume,
            faces,
            adj_start,
            adj_nbr,
            adj_face,
            trans,
            perfs,
            fw_slope: fractional_flow_slope(fluid),
            sat_floor: fluid.relperm.swc.min(fluid.sw_init),
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn wells(&self) -> &[WellSpec] {
        &self.wells
    }

    pub fn total_pore_volume(&self) -> f64 {
        self.pore_volume.iter().sum()
    }

    pub fn initial_state(&self) -> SimState {
        let n = self.grid.n_cells();
        SimState {
            sw: vec![self.fluid.sw_init; n],
            pressure: vec![self.fluid.p_init * BAR_TO_PA; n],
            time_days: 0.0,
            cum_water_injected: 0.0,
            cum_oil_produced: 0.0,
            cum_water_produced: 0.0,
        }
    }

    /// Total mobility (1/(Pa·s)).
    #[inline]
    fn total_mobility(&self, sw: f64) -> f64 {
        let (lw, lo) = self.fluid.mobilities(sw);
        (lw + lo) / CP_TO_PA_S
    }

    /// Pressure solve at the current saturation with per-well BHPs in bar.
    /// Updates `state.pressure`.
    pub fn solve(&self, state: &mut SimState, bhp_bar: &[f64]) -> Result<Flow> {
        if bhp_bar.len() != self.wells.len() {
            return Err(Error::shape("Simulator::solve bhp", self.wells.len(), bhp_bar.len()));
        }
        let n = self.grid.n_cells();
        let lt: Vec<f64> = state.sw.iter().map(|&s| self.total_mobility(s)).collect();
        let coef: Vec<f64> = self
            .faces
            .iter()
            .zip(&self.trans)
            .map(|(&(a, b), &t)| t * 0.5 * (lt[a] + lt[b]))
            .collect();
        let p_ref = bhp_bar.iter().sum::<f64>() / bhp_bar.len() as f64 * BAR_TO_PA;

        let mut active: Vec<Vec<bool>> = self.perfs.iter().map(|p| vec![true; p.len()]).collect();
        let mut delta: Vec<f64> = state.pressure.iter().map(|p| p - p_ref).collect();
        let mut iterations = 0;
        let mut perf_rate: Vec<Vec<f64>>;
        let mut passes = 0;
        loop {
            passes += 1;
            let mut diag_well = vec![0.0; n];
            let mut rhs = vec![0.0; n];
            let mut any_active = false;
            for (w, perfs) in self.perfs.iter().enumerate() {
                let dp = bhp_bar[w] * BAR_TO_PA - p_ref;
                for (p, perf) in perfs.iter().enumerate() {
                    if active[w][p] {
                        let c = perf.wi * lt[perf.cell];
                        diag_well[perf.cell] += c;
                        rhs[perf.cell] += c * dp;
                        any_active = true;
                    }
                }
            }
            if !any_active {
                // No connection to any well: no flow, pressure unchanged.
                perf_rate = self.perfs.iter().map(|p| vec![0.0; p.len()]).collect();
                let shut = active.iter().flatten().filter(|a| !**a).count();
                return Ok(Flow {
                    face_flux: vec![0.0; self.faces.len()],
                    perf_rate,
                    imbalance: 0.0,
                    cg_iterations: iterations,
                    shut_in_perforations: shut,
                });
            }
            iterations += self.pcg(&coef, &diag_well, &rhs, &mut delta)?;

            perf_rate = Vec::with_capacity(self.wells.len());
            let mut changed = false;
            for (w, perfs) in self.perfs.iter().enumerate() {
                let dp = bhp_bar[w] * BAR_TO_PA - p_ref;
                let sign = match self.wells[w].kind {
                    WellKind::Injector => 1.0,
                    WellKind::Producer => -1.0,
                };
                let mut rates = Vec::with_capacity(perfs.len());
                for (p, perf) in perfs.iter().enumerate() {
                    let q = if active[w][p] {
                        sign * perf.wi * lt[perf.cell] * (dp - delta[perf.cell])
                    } else {
                        0.0
                    };
                    if q < 0.0 {
                        // Crossflow: the perforation backflows, so shut it in.
                        active[w][p] = false;
                        changed = true;
                    }
                    rates.push(q);
                }
                perf_rate.push(rates);
            }
            if !changed {
                break;
            }
            if passes >= MAX_SHUT_IN_PASSES {
                return Err(Error::LinearSolve {
                    residual: f64::NAN,
                    iterations,
                });
            }
        }

        for (p, d) in state.pressure.iter_mut().zip(&delta) {
            *p = p_ref + d;
        }
        let face_flux: Vec<f64> = self
            .faces
            .iter()
            .zip(&coef)
            .map(|(&(a, b), &c)| c * (delta[a] - delta[b]))
            .collect();
        let (mut inj, mut prod) = (0.0, 0.0);
        for (w, rates) in perf_rate.iter().enumerate() {
            let s: f64 = rates.iter().sum();
            match self.wells[w].kind {
                WellKind::Injector => inj += s,
                WellKind::Producer => prod += s,
            }
        }
        let imbalance = if inj > 0.0 { (inj - prod).abs() / inj } else { 0.0 };
        Ok(Flow {
            face_flux,
            perf_rate,
            imbalance,
            cg_iterations: iterations,
            shut_in_perforations: active.iter().flatten().filter(|a| !**a).count(),
        })
    }

    /// Jacobi-preconditioned CG on the face-coupled system, warm-started from `x`.
    fn pcg(&self, coef: &[f64], diag_well: &[f64], b: &[f64], x: &mut [f64]) -> Result<usize> {
        let n = b.len();
        let mut diag = diag_well.to_vec();
        for (&(a, bb), &c) in self.faces.iter().zip(coef) {
            diag[a] += c;
            diag[bb] += c;
        }
        let off: Vec<f64> = self.adj_face.iter().map(|&f| coef[f as usize]).collect();
        let apply = |v: &[f64], out: &mut [f64]| {
            for i in 0..n {
                let mut acc = diag[i] * v[i];
                for k in self.adj_start[i]..self.adj_start[i + 1] {
                    acc -= off[k] * v[self.adj_nbr[k] as usize];
                }
                out[i] = acc;
            }
        };
        let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();

        let b_norm = dot(b, b).sqrt();
        if b_norm == 0.0 {
            x.iter_mut().for_each(|v| *v = 0.0);
            return Ok(0);
        }
        let target = self.numerics.cg_tol * b_norm;
        let mut r = vec![0.0; n];
        apply(x, &mut r);
        for i in 0..n {
            r[i] = b[i] - r[i];
        }
        let mut z: Vec<f64> = r.iter().zip(&diag).map(|(r, d)| r / d).collect();
        let mut p = z.clone();
        let mut ap = vec![0.0; n];
        let mut rz = dot(&r, &z);
        for it in 0..self.numerics.cg_max_iter {
            let r_norm = dot(&r, &r).sqrt();
            if r_norm <= target {
                return Ok(it);
            }
            apply(&p, &mut ap);
            let alpha = rz / dot(&p, &ap);
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            for i in 0..n {
                z[i] = r[i] / diag[i];
            }
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        let r_norm = dot(&r, &r).sqrt();
        if r_norm <= target {
            return Ok(self.numerics.cg_max_iter);
        }
        Err(Error::LinearSolve {
            residual: r_norm / b_norm,
            iterations: self.numerics.cg_max_iter,
        })
    }

    /// Advances saturation by `dt_days` with fluxes frozen, sub-stepping at the CFL limit.
    pub fn transport(&self, state: &mut SimState, flow: &Flow, dt_days: f64) -> Result<()> {
        let n = self.grid.n_cells();
        let mut outflow = vec![0.0; n];
        for (&(a, b), &f) in self.faces.iter().zip(&flow.face_flux) {
            if f > 0.0 {
                outflow[a] += f;
            } else {
                outflow[b] -= f;
            }
        }
        for (w, perfs) in self.perfs.iter().enumerate() {
            if self.wells[w].kind == WellKind::Producer {
                for (perf, q) in perfs.iter().zip(&flow.perf_rate[w]) {
                    outflow[perf.cell] += q;
                }
            }
        }
        let max_ratio = outflow
            .iter()
            .zip(&self.pore_volume)
            .map(|(o, pv)| o / pv)
            .fold(0.0, f64::max);
        let dt_cfl = if max_ratio > 0.0 && self.fw_slope > 0.0 {
            self.numerics.cfl / (max_ratio * self.fw_slope)
        } else {
            f64::INFINITY
        };

        let mut remaining = dt_days * DAY_TO_S;
        let min_dt = self.numerics.min_substep * DAY_TO_S;
        let mut rate = vec![0.0; n];
        let mut next = vec![0.0; n];
        let mut fw = vec![0.0; n];
        while remaining > 0.0 {
            let mut dt = dt_cfl.min(remaining);
            // Guard against a sliver left over by rounding.
            if remaining - dt < 1e-9 * dt_days * DAY_TO_S {
                dt = remaining;
            }
            let (inj, oil, water) = self.saturation_rates(&state.sw, &mut fw, flow, &mut rate);
            loop {
                let mut ok = true;
                for i in 0..n {
                    let s = state.sw[i] + dt * rate[i] / self.pore_volume[i];
                    if !(s >= self.sat_floor - SAT_TOL && s <= 1.0 + SAT_TOL) {
                        ok = false;
                        break;
                    }
                    next[i] = s.clamp(self.sat_floor, 1.0);
                }
                if ok {
                    break;
                }
                dt *= 0.5;
                if dt < min_dt {
                    return Err(Error::SaturationStep {
                        time_days: state.time_days,
                        min_dt_days: self.numerics.min_substep,
                    });
                }
            }
            std::mem::swap(&mut state.sw, &mut next);
            state.cum_water_injected += inj * dt;
            state.cum_oil_produced += oil * dt;
            state.cum_water_produced += water * dt;
            state.time_days += dt / DAY_TO_S;
            remaining -= dt;
        }
        Ok(())
    }

    /// Water accumulation rate per cell (m³/s); returns (injection, oil, water) well totals.
    fn saturation_rates(&self, sw: &[f64], fw: &mut [f64], flow: &Flow, rate: &mut [f64]) -> (f64, f64, f64) {
        for (f, &s) in fw.iter_mut().zip(sw) {
            *f = self.fluid.fractional_flow(s);
        }
        rate.iter_mut().for_each(|r| *r = 0.0);
        for (&(a, b), &f) in self.faces.iter().zip(&flow.face_flux) {
            let up = if f > 0.0 { a } else { b };
            let w = fw[up] * f;
            rate[a] -= w;
            rate[b] += w;
        }
        let (mut inj, mut oil, mut water) = (0.0, 0.0, 0.0);
        for (w, perfs) in self.perfs.iter().enumerate() {
            for (perf, &q) in perfs.iter().zip(&flow.perf_rate[w]) {
                match self.wells[w].kind {
                    WellKind::Injector => {
                        rate[perf.cell] += q;
                        inj += q;
                    }
                    WellKind::Producer => {
                        let f = fw[perf.cell];
                        rate[perf.cell] -= f * q;
                        water += f * q;
                        oil += (1.0 - f) * q;
                    }
                }
            }
        }
        (inj, oil, water)
    }

    /// Per-well rates (m³/day): injector water, producer oil, producer water.
    pub fn well_rates(&self, state: &SimState, flow: &Flow) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (mut inj, mut oil, mut water) = (Vec::new(), Vec::new(), Vec::new());
        for (w, perfs) in self.perfs.iter().enumerate() {
            match self.wells[w].kind {
                WellKind::Injector => inj.push(flow.perf_rate[w].iter().sum::<f64>() * DAY_TO_S),
                WellKind::Producer => {
                    let (mut o, mut wa) = (0.0, 0.0);
                    for (perf, &q) in perfs.iter().zip(&flow.perf_rate[w]) {
                        let fw = self.fluid.fractional_flow(state.sw[perf.cell]);
                        wa += fw * q;
                        o += (1.0 - fw) * q;
                    }
                    oil.push(o * DAY_TO_S);
                    water.push(wa * DAY_TO_S);
                }
            }
        }
        (inj, oil, water)
    }

    fn controls(&self, u: &BhpSchedule, step: usize) -> Vec<f64> {
        u.bhp.iter().map(|row| row[step]).collect()
    }

    /// Simulates from day 0 to `end_days`, reporting every report interval.
    pub fn run(&self, u: &BhpSchedule, end_days: f64) -> Result<SimOutput> {
        u.validate()?;
        if u.n_wells() != self.wells.len() {
            return Err(Error::shape("BhpSchedule wells", self.wells.len(), u.n_wells()));
        }
        let interval = self.numerics.report_interval;
        if !(end_days >= 0.0) || end_days > u.horizon() * (1.0 + 1e-12) {
            return Err(Error::invalid(format!(
                "end time {end_days} days outside the schedule horizon {}",
                u.horizon()
            )));
        }
        let n_intervals = (end_days / interval + 1e-9).floor() as usize;
        let times: Vec<f64> = (0..=n_intervals).map(|t| t as f64 * interval).collect();
        let mut rates = RateSeries::zeros(times.clone(), &self.wells);
        let mut state = self.initial_state();
        let mut solves = 0;
        let mut max_imbalance: f64 = 0.0;

        let record = |rates: &mut RateSeries, t: usize, state: &SimState, flow: &Flow| {
            let (inj, oil, water) = self.well_rates(state, flow);
            for (row, v) in rates.inj_water.iter_mut().zip(inj) {
                row[t] = v.max(0.0);
            }
            for (row, v) in rates.prod_oil.iter_mut().zip(oil) {
                row[t] = v.max(0.0);
            }
            for (row, v) in rates.prod_water.iter_mut().zip(water) {
                row[t] = v.max(0.0);
            }
        };

        let mut flow = self.solve(&mut state, &self.controls(u, 0))?;
        solves += 1;
        max_imbalance = max_imbalance.max(flow.imbalance);
        record(&mut rates, 0, &state, &flow);
        let mut flow_step = Some(0usize);

        let tcs = u.control_duration;
        for t in 1..=n_intervals {
            let (t_a, t_b) = (times[t - 1], times[t]);
            // Split the interval at control switches.
            let mut seg_start = t_a;
            while seg_start < t_b - 1e-9 {
                let step = ((seg_start / tcs + 1e-9).floor() as usize).min(u.n_steps() - 1);
                let seg_end = (((step + 1) as f64) * tcs).min(t_b);
                let seg_end = if step + 1 == u.n_steps() { t_b } else { seg_end };
                let n_sub = ((seg_end - seg_start) / self.numerics.pressure_step - 1e-9)
                    .ceil()
                    .max(1.0) as usize;
                let dt = (seg_end - seg_start) / n_sub as f64;
                let bhp = self.controls(u, step);
                for _ in 0..n_sub {
                    if flow_step != Some(step) {
                        flow = self.solve(&mut state, &bhp)?;
                        solves += 1;
                        max_imbalance = max_imbalance.max(flow.imbalance);
                    }
                    self.transport(&mut state, &flow, dt)?;
                    flow_step = None;
                }
                seg_start = seg_end;
            }
            state.time_days = t_b;
            let step = u.step_for_report(t_b);
            flow = self.solve(&mut state, &self.controls(u, step))?;
            solves += 1;
            max_imbalance = max_imbalance.max(flow.imbalance);
            record(&mut rates, t, &state, &flow);
            flow_step = Some(step);
            if state.sw.iter().any(|s| !s.is_finite()) {
                return Err(Error::NonFinite("saturation".into()));
            }
        }
        Ok(SimOutput {
            rates,
            final_state: state,
            max_imbalance,
            pressure_solves: solves,
        })
    }
}

/// Largest chord slope of the fractional-flow curve on a fine grid, with a small margin.
fn fractional_flow_slope(fluid: &FluidSpec) -> f64 {
    let n = 4000;
    let mut prev = fluid.fractional_flow(0.0);
    let mut best: f64 = 0.0;
    for i in 1..=n {
        let s = i as f64 / n as f64;
        let f = fluid.fractional_flow(s);
        best = best.max((f - prev).abs() * n as f64);
        prev = f;
    }
    best * 1.02
}
