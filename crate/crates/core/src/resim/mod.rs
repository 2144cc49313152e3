//! Incompressible two-phase (oil-water) finite-volume simulator.
//!
//! IMPES: a pressure solve with two-point harmonic transmissibilities and
//! Peaceman well connections, then explicit upwind saturation transport
//! sub-stepped under a CFL limit. No gravity, no capillarity. Wells are BHP
//! controlled; injectors inject water only.
//!
//! Units at the interface: bar, cp, md, m, day, m³/day. Internally SI.

mod solver;

pub use solver::{Flow, SimOutput, SimState, Simulator};

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geostat::{Geomodel, GridSpec};

pub const MD_TO_M2: f64 = 9.869_233e-16;
pub const BAR_TO_PA: f64 = 1.0e5;
pub const CP_TO_PA_S: f64 = 1.0e-3;
pub const DAY_TO_S: f64 = 86_400.0;

/// Corey relative permeability parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelPerm {
    pub swc: f64,
    pub sor: f64,
    pub krw_end: f64,
    pub kro_end: f64,
    pub nw: f64,
    pub no: f64,
}

impl Default for RelPerm {
    fn default() -> Self {
        RelPerm {
            swc: 0.1,
            sor: 0.1,
            krw_end: 0.4,
            kro_end: 0.9,
            nw: 2.0,
            no: 2.0,
        }
    }
}

impl RelPerm {
    pub fn validate(&self) -> Result<()> {
        if !(self.swc >= 0.0 && self.sor >= 0.0 && self.swc + self.sor < 1.0) {
            return Err(Error::invalid("relperm needs Swc, Sor >= 0 and Swc + Sor < 1"));
        }
        if !(self.nw >= 1.0 && self.no >= 1.0) {
            return Err(Error::invalid("Corey exponents must be >= 1"));
        }
        for e in [self.krw_end, self.kro_end] {
            if !(e > 0.0 && e <= 1.0) {
                return Err(Error::invalid("relperm endpoints must lie in (0, 1]"));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn normalized(&self, sw: f64) -> f64 {
        ((sw - self.swc) / (1.0 - self.swc - self.sor)).clamp(0.0, 1.0)
    }

    /// (krw, kro) at water saturation `sw`.
    #[inline]
    pub fn eval(&self, sw: f64) -> (f64, f64) {
        let s = self.normalized(sw);
        (self.krw_end * corey(s, self.nw), self.kro_end * corey(1.0 - s, self.no))
    }
}

#[inline]
fn corey(s: f64, n: f64) -> f64 {
    if n == 2.0 {
        s * s
    } else if n.fract() == 0.0 && n <= 8.0 {
        s.powi(n as i32)
    } else {
        s.powf(n)
    }
}

/// (krw, kro) at `sw` for the given Corey parameters.
pub fn relperm(sw: f64, rp: &RelPerm) -> (f64, f64) {
    rp.eval(sw)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluidSpec {
    /// cp
    pub mu_o: f64,
    pub mu_w: f64,
    pub porosity: f64,
    pub relperm: RelPerm,
    pub sw_init: f64,
    /// bar; only seeds the first pressure iterate.
    pub p_init: f64,
}

impl Default for FluidSpec {
    fn default() -> Self {
        FluidSpec {
            mu_o: 2.0,
            mu_w: 1.0,
            porosity: 0.2,
            relperm: RelPerm::default(),
            sw_init: 0.1,
            p_init: 400.0,
        }
    }
}

impl FluidSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu_o > 0.0 && self.mu_w > 0.0) {
            return Err(Error::invalid("viscosities must be > 0"));
        }
        if !(self.porosity > 0.0 && self.porosity <= 1.0) {
            return Err(Error::invalid("porosity must lie in (0, 1]"));
        }
        self.relperm.validate()?;
        let rp = &self.relperm;
        if !(self.sw_init >= rp.swc && self.sw_init <= 1.0 - rp.sor) {
            return Err(Error::invalid("initial water saturation must lie in [Swc, 1 - Sor]"));
        }
        if !self.p_init.is_finite() {
            return Err(Error::invalid("initial pressure must be finite"));
        }
        Ok(())
    }

    /// Phase mobilities (1/cp) at `sw`.
    #[inline]
    pub fn mobilities(&self, sw: f64) -> (f64, f64) {
        let (krw, kro) = self.relperm.eval(sw);
        (krw / self.mu_w, kro / self.mu_o)
    }

    #[inline]
    pub fn fractional_flow(&self, sw: f64) -> f64 {
        let (lw, lo) = self.mobilities(sw);
        let lt = lw + lo;
        if lt > 0.0 {
            lw / lt
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WellKind {
    Injector,
    Producer,
}

/// Vertical well perforated over layers `k_top..=k_bottom` of column (i, j).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WellSpec {
    pub name: String,
    pub kind: WellKind,
    pub i: usize,
    pub j: usize,
    pub k_top: usize,
    pub k_bottom: usize,
    /// Wellbore radius (m).
    pub r_w: f64,
}

impl WellSpec {
    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        if self.i >= grid.nx || self.j >= grid.ny {
            return Err(Error::invalid(format!("well {} lies outside the grid", self.name)));
        }
        if self.k_top > self.k_bottom || self.k_bottom >= grid.nz {
            return Err(Error::invalid(format!("well {} has an invalid layer range", self.name)));
        }
        if !(self.r_w > 0.0) {
            return Err(Error::invalid(format!("well {} needs r_w > 0", self.name)));
        }
        Ok(())
    }

    pub fn cells(&self, grid: &GridSpec) -> Vec<usize> {
        (self.k_top..=self.k_bottom)
            .map(|k| grid.index(self.i, self.j, k))
            .collect()
    }
}

/// All perforated cells of all wells, in well order.
pub fn well_cells(wells: &[WellSpec], grid: &GridSpec) -> Vec<usize> {
    wells.iter().flat_map(|w| w.cells(grid)).collect()
}

pub fn validate_wells(wells: &[WellSpec], grid: &GridSpec) -> Result<()> {
    if wells.is_empty() {
        return Err(Error::invalid("at least one well is required"));
    }
    let mut names = std::collections::BTreeSet::new();
    for w in wells {
        w.validate(grid)?;
        if !names.insert(w.name.as_str()) {
            return Err(Error::invalid(format!("duplicate well name {}", w.name)));
        }
    }
    let cells = well_cells(wells, grid);
    let unique: std::collections::BTreeSet<_> = cells.iter().collect();
    if unique.len() != cells.len() {
        return Err(Error::invalid("two wells share a perforated cell"));
    }
    Ok(())
}

/// Peaceman well index (md·m) for an isotropic cell.
pub fn well_index(grid: &GridSpec, k_md: f64, r_w: f64) -> Result<f64> {
    if !(k_md > 0.0) {
        return Err(Error::invalid("well index needs k > 0"));
    }
    let r_eq = 0.14 * (grid.dx * grid.dx + grid.dy * grid.dy).sqrt();
    if r_eq <= r_w {
        return Err(Error::invalid(format!(
            "equivalent radius {r_eq:.4} m does not exceed wellbore radius {r_w} m"
        )));
    }
    Ok(2.0 * std::f64::consts::PI * k_md * grid.dz / (r_eq / r_w).ln())
}

/// Per-well BHPs (bar) held constant over `n_cs` control steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BhpSchedule {
    pub control_duration: f64,
    /// `bhp[well][step]`
    pub bhp: Vec<Vec<f64>>,
    /// Per-well (lower, upper).
    pub bounds: Vec<(f64, f64)>,
}

impl BhpSchedule {
    pub fn constant(n_cs: usize, control_duration: f64, bounds: &[(f64, f64)], values: &[f64]) -> Self {
        BhpSchedule {
            control_duration,
            bhp: values.iter().map(|&v| vec![v; n_cs]).collect(),
            bounds: bounds.to_vec(),
        }
    }

    /// Every well at the midpoint of its bounds.
    pub fn mid_bounds(n_cs: usize, control_duration: f64, bounds: &[(f64, f64)]) -> Self {
        let mid: Vec<f64> = bounds.iter().map(|(l, u)| 0.5 * (l + u)).collect();
        Self::constant(n_cs, control_duration, bounds, &mid)
    }

    pub fn n_wells(&self) -> usize {
        self.bhp.len()
    }

    pub fn n_steps(&self) -> usize {
        self.bhp.first().map_or(0, |r| r.len())
    }

    pub fn horizon(&self) -> f64 {
        self.n_steps() as f64 * self.control_duration
    }

    pub fn validate(&self) -> Result<()> {
        if self.bhp.is_empty() || self.n_steps() == 0 {
            return Err(Error::invalid("empty BHP schedule"));
        }
        if !(self.control_duration > 0.0) {
            return Err(Error::invalid("control duration must be > 0"));
        }
        if self.bounds.len() != self.bhp.len() {
            return Err(Error::shape("BhpSchedule bounds", self.bhp.len(), self.bounds.len()));
        }
        for (w, (row, &(lo, hi))) in self.bhp.iter().zip(&self.bounds).enumerate() {
            if row.len() != self.n_steps() {
                return Err(Error::shape("BhpSchedule row", self.n_steps(), row.len()));
            }
            if !(lo <= hi) {
                return Err(Error::invalid(format!("well {w}: lower bound exceeds upper")));
            }
            for (s, &v) in row.iter().enumerate() {
                if !(v >= lo && v <= hi) {
                    return Err(Error::invalid(format!(
                        "BHP {v} of well {w} at step {s} outside [{lo}, {hi}]"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Control step whose controls drive the rates reported at `t_days`.
    ///
    /// Day 0 belongs to the first step; any later report time belongs to the
    /// step of the interval that ends there, so a report at a control switch
    /// still reflects the controls that were operated up to it.
    pub fn step_for_report(&self, t_days: f64) -> usize {
        if t_days <= 0.0 {
            return 0;
        }
        let s = (t_days / self.control_duration).ceil() as usize;
        s.saturating_sub(1).min(self.n_steps() - 1)
    }

    /// Flattened free variables (steps `first_free..`), well-major within a step.
    pub fn free_vector(&self, first_free: usize) -> Vec<f64> {
        let mut v = Vec::new();
        for s in first_free..self.n_steps() {
            for row in &self.bhp {
                v.push(row[s]);
            }
        }
        v
    }

    /// Inverse of [`free_vector`](Self::free_vector).
    pub fn set_free_vector(&mut self, first_free: usize, v: &[f64]) -> Result<()> {
        let nw = self.n_wells();
        let expected = nw * (self.n_steps() - first_free);
        if v.len() != expected {
            return Err(Error::shape("BhpSchedule::set_free_vector", expected, v.len()));
        }
        for (idx, &x) in v.iter().enumerate() {
            let s = first_free + idx / nw;
            self.bhp[idx % nw][s] = x;
        }
        Ok(())
    }

    /// Per-variable bounds of the free vector.
    pub fn free_bounds(&self, first_free: usize) -> Vec<(f64, f64)> {
        (first_free..self.n_steps())
            .flat_map(|_| self.bounds.iter().copied())
            .collect()
    }

    pub fn to_csv(&self, wells: &[WellSpec]) -> String {
        let mut out = String::from("well,step,bhp_bar\n");
        for (w, row) in self.bhp.iter().enumerate() {
            for (s, v) in row.iter().enumerate() {
                let _ = writeln!(out, "{},{},{:.12e}", wells[w].name, s + 1, v);
            }
        }
        out
    }

    pub fn write_csv(&self, wells: &[WellSpec], path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv(wells)).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, wells: &[WellSpec], control_duration: f64, bounds: &[(f64, f64)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries: Vec<(usize, usize, f64)> = Vec::new();
        for (line_no, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(Error::format(path, format!("line {}: expected 3 fields", line_no + 1)));
            }
            let w = wells
                .iter()
                .position(|x| x.name == parts[0])
                .ok_or_else(|| Error::format(path, format!("unknown well {}", parts[0])))?;
            let s: usize = parts[1]
                .parse()
                .map_err(|_| Error::format(path, format!("bad step on line {}", line_no + 1)))?;
            let v: f64 = parts[2]
                .parse()
                .map_err(|_| Error::format(path, format!("bad BHP on line {}", line_no + 1)))?;
            if s == 0 {
                return Err(Error::format(path, "control steps are 1-based"));
            }
            entries.push((w, s - 1, v));
        }
        let n_cs = entries.iter().map(|e| e.1 + 1).max().unwrap_or(0);
        let mut bhp = vec![vec![f64::NAN; n_cs]; wells.len()];
        for (w, s, v) in entries {
            bhp[w][s] = v;
        }
        if bhp.iter().flatten().any(|v| v.is_nan()) {
            return Err(Error::format(path, "schedule is missing entries"));
        }
        let sched = BhpSchedule {
            control_duration,
            bhp,
            bounds: bounds.to_vec(),
        };
        sched.validate()?;
        Ok(sched)
    }
}

/// Well rates (m³/day, nonnegative) at the report times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSeries {
    pub report_times: Vec<f64>,
    pub injector_names: Vec<String>,
    pub producer_names: Vec<String>,
    /// `inj_water[injector][t]`
    pub inj_water: Vec<Vec<f64>>,
    pub prod_oil: Vec<Vec<f64>>,
    pub prod_water: Vec<Vec<f64>>,
}

impl RateSeries {
    pub fn zeros(report_times: Vec<f64>, wells: &[WellSpec]) -> Self {
        let nt = report_times.len();
        let inj: Vec<String> = wells
            .iter()
            .filter(|w| w.kind == WellKind::Injector)
            .map(|w| w.name.clone())
            .collect();
        let prod: Vec<String> = wells
            .iter()
            .filter(|w| w.kind == WellKind::Producer)
            .map(|w| w.name.clone())
            .collect();
        RateSeries {
            report_times,
            inj_water: vec![vec![0.0; nt]; inj.len()],
            prod_oil: vec![vec![0.0; nt]; prod.len()],
            prod_water: vec![vec![0.0; nt]; prod.len()],
            injector_names: inj,
            producer_names: prod,
        }
    }

    pub fn n_times(&self) -> usize {
        self.report_times.len()
    }

    pub fn n_injectors(&self) -> usize {
        self.inj_water.len()
    }

    pub fn n_producers(&self) -> usize {
        self.prod_oil.len()
    }

    /// Number of well-phase streams, `n_I + 2 n_P`.
    pub fn n_streams(&self) -> usize {
        self.n_injectors() + 2 * self.n_producers()
    }

    /// Streams in canonical order: injector water, producer oil, producer water.
    pub fn streams(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.inj_water
            .iter()
            .chain(self.prod_oil.iter())
            .chain(self.prod_water.iter())
    }

    pub fn streams_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.inj_water
            .iter_mut()
            .chain(self.prod_oil.iter_mut())
            .chain(self.prod_water.iter_mut())
    }

    pub fn validate(&self) -> Result<()> {
        let nt = self.n_times();
        if self.prod_oil.len() != self.prod_water.len() {
            return Err(Error::shape(
                "RateSeries producers",
                self.prod_oil.len(),
                self.prod_water.len(),
            ));
        }
        for s in self.streams() {
            if s.len() != nt {
                return Err(Error::shape("RateSeries stream", nt, s.len()));
            }
            if s.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::invalid("rates must be finite and nonnegative"));
            }
        }
        Ok(())
    }

    /// Same shape, compared by layout only.
    pub fn same_shape(&self, other: &RateSeries) -> bool {
        self.n_times() == other.n_times()
            && self.n_injectors() == other.n_injectors()
            && self.n_producers() == other.n_producers()
    }

    /// CSV with one column per well-phase in well declaration order.
    pub fn to_csv(&self, wells: &[WellSpec]) -> String {
        let mut cols: Vec<(String, &Vec<f64>)> = Vec::new();
        let (mut ii, mut pp) = (0, 0);
        for w in wells {
            match w.kind {
                WellKind::Injector => {
                    cols.push((format!("{}:water_inj", w.name), &self.inj_water[ii]));
                    ii += 1;
                }
                WellKind::Producer => {
                    cols.push((format!("{}:oil_prod", w.name), &self.prod_oil[pp]));
                    cols.push((format!("{}:water_prod", w.name), &self.prod_water[pp]));
                    pp += 1;
                }
            }
        }
        let mut out = String::from("time_days");
        for (name, _) in &cols {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (t, time) in self.report_times.iter().enumerate() {
            let _ = write!(out, "{}", fmt12(*time));
            for (_, col) in &cols {
                let _ = write!(out, ",{}", fmt12(col[t]));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, wells: &[WellSpec], path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv(wells)).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, wells: &[WellSpec]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::format(path, "empty rate file"))?
            .split(',')
            .collect();
        let expected_cols = 1 + wells
            .iter()
            .map(|w| if w.kind == WellKind::Injector { 1 } else { 2 })
            .sum::<usize>();
        if header.len() != expected_cols {
            return Err(Error::format(path, format!("expected {expected_cols} columns")));
        }
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let row: std::result::Result<Vec<f64>, _> = line.split(',').map(|v| v.trim().parse()).collect();
            let row = row.map_err(|_| Error::format(path, "unparseable number"))?;
            if row.len() != expected_cols {
                return Err(Error::format(path, "ragged rate row"));
            }
            rows.push(row);
        }
        let mut rs = RateSeries::zeros(rows.iter().map(|r| r[0]).collect(), wells);
        let (mut col, mut ii, mut pp) = (1, 0, 0);
        for w in wells {
            match w.kind {
                WellKind::Injector => {
                    rs.inj_water[ii] = rows.iter().map(|r| r[col]).collect();
                    ii += 1;
                    col += 1;
                }
                WellKind::Producer => {
                    rs.prod_oil[pp] = rows.iter().map(|r| r[col]).collect();
                    rs.prod_water[pp] = rows.iter().map(|r| r[col + 1]).collect();
                    pp += 1;
                    col += 2;
                }
            }
        }
        Ok(rs)
    }
}

/// 12 significant digits.
pub(crate) fn fmt12(v: f64) -> String {
    format!("{v:.11e}")
}

/// Field totals per report time.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldRates {
    pub injection: Vec<f64>,
    pub water_production: Vec<f64>,
    pub oil_production: Vec<f64>,
}

pub fn field_rates(r: &RateSeries) -> FieldRates {
    let sum =
        |rows: &[Vec<f64>]| -> Vec<f64> { (0..r.n_times()).map(|t| rows.iter().map(|row| row[t]).sum()).collect() };
    FieldRates {
        injection: sum(&r.inj_water),
        water_production: sum(&r.prod_water),
        oil_production: sum(&r.prod_oil),
    }
}

/// Solver controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Numerics {
    pub report_interval: f64,
    /// Target length of a pressure step; report intervals are split evenly.
    pub pressure_step: f64,
    pub cfl: f64,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    pub min_substep: f64,
}

impl Default for Numerics {
    fn default() -> Self {
        Numerics {
            report_interval: 30.0,
            pressure_step: 30.0,
            cfl: 0.5,
            cg_tol: 1e-10,
            cg_max_iter: 5000,
            min_substep: 1e-6,
        }
    }
}

impl Numerics {
    pub fn validate(&self) -> Result<()> {
        if !(self.report_interval > 0.0 && self.pressure_step > 0.0) {
            return Err(Error::invalid("report interval and pressure step must be > 0"));
        }
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(Error::invalid("CFL number must lie in (0, 1]"));
        }
        if !(self.cg_tol > 0.0) || self.cg_max_iter == 0 {
            return Err(Error::invalid("invalid CG settings"));
        }
        Ok(())
    }
}

/// Full-horizon simulation.
pub fn simulate(
    m: &Geomodel,
    fluid: &FluidSpec,
    wells: &[WellSpec],
    u: &BhpSchedule,
    numerics: &Numerics,
) -> Result<RateSeries> {
    Ok(Simulator::new(m, fluid, wells, numerics)?.run(u, u.horizon())?.rates)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relperm_endpoints() {
        let rp = RelPerm::default();
        assert_eq!(relperm(rp.swc, &rp), (0.0, rp.kro_end));
        let (krw, kro) = relperm(1.0 - rp.sor, &rp);
        assert!((krw - rp.krw_end).abs() < 1e-15);
        assert_eq!(kro, 0.0);
    }

    #[test]
    fn relperm_midpoint() {
        let (krw, kro) = relperm(0.5, &RelPerm::default());
        assert!((krw - 0.1).abs() < 1e-15);
        assert!((kro - 0.225).abs() < 1e-15);
    }

    #[test]
    fn relperm_clamps_outside_mobile_range() {
        let rp = RelPerm::default();
        assert_eq!(relperm(0.0, &rp), (0.0, rp.kro_end));
        assert_eq!(relperm(1.0, &rp).1, 0.0);
    }

    #[test]
    fn well_index_formula() {
        let g = GridSpec::new(1, 1, 1, 15.0, 15.0, 4.0).unwrap();
        let wi = well_index(&g, 100.0, 0.1).unwrap();
        let r_eq = 0.14 * (450f64).sqrt();
        assert!((r_eq - 2.9698).abs() < 1e-4);
        let expect = 2.0 * std::f64::consts::PI * 400.0 / (r_eq / 0.1).ln();
        assert!((wi - expect).abs() < 1e-9);
        assert!((wi - 741.14).abs() < 0.01, "{wi}");
        let wi2 = well_index(&g, 200.0, 0.1).unwrap();
        assert!((wi2 - 2.0 * wi).abs() < 1e-10);
        assert!(well_index(&g, 100.0, 3.0).is_err());
        assert!(well_index(&g, 0.0, 0.1).is_err());
    }

    fn two_wells() -> Vec<WellSpec> {
        vec![
            WellSpec {
                name: "I1".into(),
                kind: WellKind::Injector,
                i: 0,
                j: 0,
                k_top: 0,
                k_bottom: 0,
                r_w: 0.1,
            },
            WellSpec {
                name: "P1".into(),
                kind: WellKind::Producer,
                i: 1,
                j: 0,
                k_top: 0,
                k_bottom: 0,
                r_w: 0.1,
            },
        ]
    }

    #[test]
    fn field_rates_sum_wells() {
        let mut r = RateSeries::zeros(vec![0.0, 30.0], &two_wells());
        r.prod_oil[0] = vec![100.0, 80.0];
        let f = field_rates(&r);
        assert_eq!(f.oil_production, vec![100.0, 80.0]);
        assert_eq!(f.injection, vec![0.0, 0.0]);

        let mut wells = two_wells();
        wells.push(WellSpec {
            name: "P2".into(),
            i: 2,
            ..wells[1].clone()
        });
        let mut r = RateSeries::zeros(vec![0.0, 30.0], &wells);
        r.prod_oil[0][1] = 100.0;
        r.prod_oil[1][1] = 50.0;
        assert_eq!(field_rates(&r).oil_production[1], 150.0);
    }

    #[test]
    fn schedule_report_step_mapping() {
        let s = BhpSchedule::mid_bounds(5, 180.0, &[(300.0, 315.0)]);
        assert_eq!(s.step_for_report(0.0), 0);
        assert_eq!(s.step_for_report(30.0), 0);
        assert_eq!(s.step_for_report(180.0), 0);
        assert_eq!(s.step_for_report(210.0), 1);
        assert_eq!(s.step_for_report(900.0), 4);
    }

    #[test]
    fn free_vector_round_trip() {
        let bounds = [(325.0, 335.0), (300.0, 315.0)];
        let mut s = BhpSchedule::mid_bounds(3, 180.0, &bounds);
        let v = vec![326.0, 301.0, 327.0, 302.0];
        s.set_free_vector(1, &v).unwrap();
        assert_eq!(s.bhp[0], vec![330.0, 326.0, 327.0]);
        assert_eq!(s.bhp[1], vec![307.5, 301.0, 302.0]);
        assert_eq!(s.free_vector(1), v);
        assert_eq!(s.free_bounds(1).len(), 4);
        assert!(s.set_free_vector(1, &v[..3]).is_err());
    }

    #[test]
    fn schedule_bounds_are_enforced() {
        let mut s = BhpSchedule::mid_bounds(2, 180.0, &[(300.0, 315.0)]);
        assert!(s.validate().is_ok());
        s.bhp[0][1] = 316.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn csv_round_trips() {
        let wells = two_wells();
        let dir = tempfile::tempdir().unwrap();
        let mut r = RateSeries::zeros(vec![0.0, 30.0], &wells);
        r.inj_water[0] = vec![12.5, 1.0 / 3.0];
        r.prod_water[0] = vec![0.0, 7.25];
        let p = dir.path().join("r.csv");
        r.write_csv(&wells, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("time_days,I1:water_inj,P1:oil_prod,P1:water_prod\n"));
        let back = RateSeries::read_csv(&p, &wells).unwrap();
        assert!((back.inj_water[0][1] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(back.prod_water[0][1], 7.25);

        let bounds = [(325.0, 335.0), (300.0, 315.0)];
        let s = BhpSchedule::mid_bounds(3, 180.0, &bounds);
        let sp = dir.path().join("s.csv");
        s.write_csv(&wells, &sp).unwrap();
        assert_eq!(BhpSchedule::read_csv(&sp, &wells, 180.0, &bounds).unwrap(), s);
    }
}
