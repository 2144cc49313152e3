//! Declarative run configuration with built-in `paper` and `desk` profiles.
//!
//! A config file is a partial TOML document laid over the selected profile.
//! Environment variables `CLRM_<SECTION>__<FIELD>=<value>` override single
//! leaves after the file (e.g. `CLRM_OPTIMIZATION__PSO__N_SWARM=10`).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geostat::{GridSpec, VariogramKind, VariogramSpec};
use crate::hm::HmConfig;
use crate::proxy::{ErrorConfig, ProxyConfig, TrainConfig};
use crate::resim::{self, BhpSchedule, FluidSpec, Numerics, WellKind, WellSpec};
use crate::robustopt::{trim_count, ConstraintSpec, EconParams, Phase, RobustConfig};

pub const SCHEMA_VERSION: u32 = 1;
pub const ENV_PREFIX: &str = "CLRM_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    Desk,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            _ => Err(Error::invalid(format!(
                "unknown profile {s:?} (expected paper or desk)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlsConfig {
    /// bar
    pub injector_bounds: (f64, f64),
    pub producer_bounds: (f64, f64),
    /// days
    pub control_duration: f64,
    pub n_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    /// Realizations used to build the PCA basis.
    pub n_pca: usize,
    /// Synthetic truths generated after the PCA set.
    pub n_truth: usize,
    /// Prior ensemble size; the first `n_prior` PCA realizations.
    pub n_prior: usize,
    pub pca_energy: f64,
    /// Upper bound on the latent dimension, applied after the energy criterion.
    #[serde(default)]
    pub max_latent: Option<usize>,
    /// Condition realizations to hard data in every perforated cell.
    pub hard_data: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxySettings {
    pub n_neu: usize,
    pub channels: [usize; 3],
    pub pad_to_multiple_of_8: bool,
    pub n_train_per_model: usize,
    pub n_test_per_model: usize,
    pub retrain_train_per_model: usize,
    pub retrain_test_per_model: usize,
    pub train: TrainConfig,
    pub retrain: TrainConfig,
    pub error: ErrorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClrmSettings {
    pub n_cycles: usize,
    /// Index into the truth realizations.
    pub truth: usize,
    /// Simulation-equivalent cost per RML run used when reporting a planned
    /// (not executed) ledger.
    pub reference_hm_sims_per_run: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub profile: Profile,
    pub seed: u64,
    pub grid: GridSpec,
    pub variogram: VariogramSpec,
    pub fluid: FluidSpec,
    pub numerics: Numerics,
    pub wells: Vec<WellSpec>,
    pub controls: ControlsConfig,
    pub economics: EconParams,
    pub constraints: Vec<ConstraintSpec>,
    pub ensemble: EnsembleConfig,
    pub proxy: ProxySettings,
    pub optimization: RobustConfig,
    pub history_matching: HmConfig,
    pub clrm: ClrmSettings,
}

fn well(name: &str, kind: WellKind, i: usize, j: usize, nz: usize) -> WellSpec {
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

fn field_constraints(
    injection: f64,
    per_injector: f64,
    water_production: f64,
    wells: &[WellSpec],
) -> Vec<ConstraintSpec> {
    let mut cs = vec![ConstraintSpec {
        well: None,
        phase: Phase::WaterInjection,
        limit: injection,
    }];
    cs.extend(
        wells
            .iter()
            .filter(|w| w.kind == WellKind::Injector)
            .map(|w| ConstraintSpec {
                well: Some(w.name.clone()),
                phase: Phase::WaterInjection,
                limit: per_injector,
            }),
    );
    cs.push(ConstraintSpec {
        well: None,
        phase: Phase::WaterProduction,
        limit: water_production,
    });
    cs
}

impl RunConfig {
    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Paper => Self::paper(),
            Profile::Desk => Self::desk(),
        }
    }

    fn paper() -> Self {
        let nz = 8;
        let wells = vec![
            well("I1", WellKind::Injector, 10, 27, nz),
            well("I2", WellKind::Injector, 20, 12, nz),
            well("I3", WellKind::Injector, 29, 27, nz),
            well("P1", WellKind::Producer, 4, 4, nz),
            well("P2", WellKind::Producer, 35, 4, nz),
            well("P3", WellKind::Producer, 4, 35, nz),
            well("P4", WellKind::Producer, 35, 35, nz),
        ];
        RunConfig {
            schema_version: SCHEMA_VERSION,
            profile: Profile::Paper,
            seed: 1,
            grid: GridSpec {
                nx: 40,
                ny: 40,
                nz,
                dx: 15.0,
                dy: 15.0,
                dz: 4.0,
            },
            variogram: VariogramSpec {
                sill: 2.25,
                r_max: 375.0,
                r_mid: 120.0,
                r_min: 8.0,
                azimuth: 30.0,
                mean: 4.79,
                kind: VariogramKind::Spherical,
            },
            fluid: FluidSpec::default(),
            numerics: Numerics::default(),
            constraints: field_constraints(1400.0, 1100.0, 1100.0, &wells),
            wells,
            controls: ControlsConfig {
                injector_bounds: (325.0, 335.0),
                producer_bounds: (300.0, 315.0),
                control_duration: 180.0,
                n_steps: 5,
            },
            economics: EconParams::default(),
            ensemble: EnsembleConfig {
                n_pca: 400,
                n_truth: 5,
                n_prior: 20,
                pca_energy: 0.85,
                max_latent: None,
                hard_data: true,
            },
            proxy: ProxySettings {
                n_neu: 200,
                channels: [4, 8, 16],
                pad_to_multiple_of_8: false,
                n_train_per_model: 15,
                n_test_per_model: 10,
                retrain_train_per_model: 10,
                retrain_test_per_model: 0,
                train: TrainConfig::default(),
                retrain: TrainConfig::retrain(1e-4),
                error: ErrorConfig::default(),
            },
            optimization: RobustConfig::default(),
            history_matching: HmConfig::default(),
            clrm: ClrmSettings {
                n_cycles: 5,
                truth: 0,
                reference_hm_sims_per_run: 110.0,
            },
        }
    }

    fn desk() -> Self {
        let nz = 8;
        let wells = vec![
            well("I1", WellKind::Injector, 2, 2, nz),
            well("I2", WellKind::Injector, 17, 17, nz),
            well("P1", WellKind::Producer, 17, 2, nz),
            well("P2", WellKind::Producer, 2, 17, nz),
        ];
        let paper = Self::paper();
        // Horizontal ranges scale with the lateral extent (20 of 40 cells).
        let scale = 0.5;
        RunConfig {
            profile: Profile::Desk,
            grid: GridSpec {
                nx: 20,
                ny: 20,
                ..paper.grid
            },
            variogram: VariogramSpec {
                r_max: paper.variogram.r_max * scale,
                r_mid: paper.variogram.r_mid * scale,
                ..paper.variogram
            },
            constraints: field_constraints(650.0, 450.0, 200.0, &wells),
            wells,
            controls: ControlsConfig {
                n_steps: 3,
                ..paper.controls
            },
            ensemble: EnsembleConfig {
                n_pca: 100,
                n_truth: 5,
                n_prior: 10,
                pca_energy: 0.85,
                max_latent: Some(24),
                hard_data: true,
            },
            proxy: ProxySettings {
                n_neu: 50,
                pad_to_multiple_of_8: true,
                n_train_per_model: 8,
                n_test_per_model: 4,
                retrain_train_per_model: 5,
                retrain_test_per_model: 0,
                train: TrainConfig {
                    max_epochs: 4000,
                    test_every: 100,
                    ..TrainConfig::default()
                },
                retrain: TrainConfig {
                    max_epochs: 600,
                    test_every: 0,
                    ..TrainConfig::retrain(1e-4)
                },
                ..paper.proxy
            },
            clrm: ClrmSettings {
                n_cycles: 3,
                ..paper.clrm
            },
            ..paper
        }
    }

    pub fn horizon(&self) -> f64 {
        self.controls.n_steps as f64 * self.controls.control_duration
    }

    pub fn n_t(&self) -> usize {
        (self.horizon() / self.numerics.report_interval).round() as usize + 1
    }

    pub fn injector_names(&self) -> Vec<String> {
        self.names(WellKind::Injector)
    }

    pub fn producer_names(&self) -> Vec<String> {
        self.names(WellKind::Producer)
    }

    fn names(&self, kind: WellKind) -> Vec<String> {
        self.wells
            .iter()
            .filter(|w| w.kind == kind)
            .map(|w| w.name.clone())
            .collect()
    }

    /// Per-well BHP bounds in well declaration order.
    pub fn bhp_bounds(&self) -> Vec<(f64, f64)> {
        self.wells
            .iter()
            .map(|w| match w.kind {
                WellKind::Injector => self.controls.injector_bounds,
                WellKind::Producer => self.controls.producer_bounds,
            })
            .collect()
    }

    /// Every well at mid-bounds for every step.
    pub fn base_schedule(&self) -> BhpSchedule {
        BhpSchedule::mid_bounds(
            self.controls.n_steps,
            self.controls.control_duration,
            &self.bhp_bounds(),
        )
    }

    pub fn proxy_config(&self) -> ProxyConfig {
        let mut cfg = ProxyConfig::new(
            [self.grid.nx, self.grid.ny, self.grid.nz],
            self.proxy.n_neu,
            self.n_t(),
            self.injector_names(),
            self.producer_names(),
        );
        cfg.schedule_wells = self.wells.iter().map(|w| w.name.clone()).collect();
        cfg.channels = self.proxy.channels;
        cfg.pad_to_multiple_of_8 = self.proxy.pad_to_multiple_of_8;
        cfg.report_interval = self.numerics.report_interval;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "config schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.grid.validate()?;
        self.variogram.validate()?;
        self.fluid.validate()?;
        self.numerics.validate()?;
        resim::validate_wells(&self.wells, &self.grid)?;
        if self.injector_names().is_empty() || self.producer_names().is_empty() {
            return Err(Error::invalid("config needs at least one injector and one producer"));
        }
        for c in &self.constraints {
            c.validate(&self.wells)?;
        }
        self.economics.validate()?;
        let c = &self.controls;
        if c.n_steps == 0 || !(c.control_duration > 0.0) {
            return Err(Error::invalid("controls need n_steps >= 1 and control_duration > 0"));
        }
        if !(c.injector_bounds.0 <= c.injector_bounds.1 && c.producer_bounds.0 <= c.producer_bounds.1) {
            return Err(Error::invalid("BHP bounds need lower <= upper"));
        }
        let steps_per_control = c.control_duration / self.numerics.report_interval;
        if (steps_per_control - steps_per_control.round()).abs() > 1e-9 {
            return Err(Error::invalid(
                "control duration must be a multiple of the report interval",
            ));
        }
        let e = &self.ensemble;
        if e.n_pca < 2 || e.n_truth == 0 || e.n_prior == 0 || e.n_prior > e.n_pca {
            return Err(Error::invalid(
                "ensemble needs n_pca >= 2, n_truth >= 1 and 1 <= n_prior <= n_pca",
            ));
        }
        if !(e.pca_energy > 0.0 && e.pca_energy <= 1.0) || e.max_latent == Some(0) {
            return Err(Error::invalid(
                "pca_energy must lie in (0, 1] and max_latent must be >= 1",
            ));
        }
        trim_count(e.n_prior, self.optimization.trim_fraction)?;
        let p = &self.proxy;
        if p.n_train_per_model == 0 || p.retrain_train_per_model == 0 {
            return Err(Error::invalid(
                "proxy training needs at least one training schedule per model",
            ));
        }
        p.train.validate()?;
        p.retrain.validate()?;
        p.error.validate()?;
        self.proxy_config().validate()?;
        self.history_matching.validate()?;
        let clrm = &self.clrm;
        if clrm.n_cycles == 0 || clrm.n_cycles > c.n_steps {
            return Err(Error::invalid(format!(
                "n_cycles must lie in 1..={} (one cycle per control step)",
                c.n_steps
            )));
        }
        if clrm.truth >= e.n_truth {
            return Err(Error::invalid(format!(
                "truth index {} but only {} truths",
                clrm.truth, e.n_truth
            )));
        }
        if !(clrm.reference_hm_sims_per_run >= 0.0) {
            return Err(Error::invalid("reference_hm_sims_per_run must be >= 0"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("config serialization: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}

/// Where a config leaf got its value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    PaperDefault,
    DeskDefault,
    File,
    Env,
}

#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    /// Dotted leaf path to origin; array-valued keys count as one leaf.
    pub sources: BTreeMap<String, Source>,
}

fn leaves(prefix: &str, v: &toml::Value, out: &mut Vec<String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, child) in t {
                let path = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                leaves(&path, child, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

/// Overlays `top` onto `base`; tables merge key by key, everything else replaces.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_env_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Builds the table of environment overrides (`CLRM_A__B=v` sets `a.b`).
fn env_table<I: IntoIterator<Item = (String, String)>>(env: I) -> Result<toml::Table> {
    let mut root = toml::Table::new();
    let mut vars: Vec<(String, String)> = env
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX) && k.len() > ENV_PREFIX.len())
        .collect();
    vars.sort();
    for (k, v) in vars {
        let path: Vec<String> = k[ENV_PREFIX.len()..]
            .split("__")
            .map(|s| s.to_ascii_lowercase())
            .collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(Error::invalid(format!("malformed override variable {k}")));
        }
        let mut t = &mut root;
        for p in &path[..path.len() - 1] {
            t = t
                .entry(p.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| Error::invalid(format!("override {k} conflicts with another variable")))?;
        }
        t.insert(path[path.len() - 1].clone(), parse_env_value(&v));
    }
    Ok(root)
}

/// Resolves profile defaults, an optional file and environment overrides.
///
/// The profile comes from `profile` if given, else the file's `profile` key,
/// else `desk`.
pub fn load_config<I>(path: Option<&Path>, profile: Option<Profile>, env: I) -> Result<LoadedConfig>
where
    I: IntoIterator<Item = (String, String)>,
{
    let file: toml::Table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            text.parse()
                .map_err(|e: toml::de::Error| Error::invalid(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    let env = env_table(env)?;
    let from_layer = |t: &toml::Table| -> Result<Option<Profile>> {
        t.get("profile")
            .map(|v| {
                v.as_str()
                    .ok_or_else(|| Error::invalid("profile must be a string"))?
                    .parse()
            })
            .transpose()
    };
    let profile = match profile {
        Some(p) => p,
        None => from_layer(&env)?.or(from_layer(&file)?).unwrap_or(Profile::Desk),
    };
    let defaults = RunConfig::profile(profile);
    let mut merged = toml::Table::try_from(&defaults).map_err(|e| Error::invalid(format!("config defaults: {e}")))?;
    let default_source = match profile {
        Profile::Paper => Source::PaperDefault,
        Profile::Desk => Source::DeskDefault,
    };
    let mut sources = BTreeMap::new();
    let mut keys = Vec::new();
    leaves("", &toml::Value::Table(merged.clone()), &mut keys);
    sources.extend(keys.drain(..).map(|k| (k, default_source)));
    leaves("", &toml::Value::Table(file.clone()), &mut keys);
    sources.extend(keys.drain(..).map(|k| (k, Source::File)));
    leaves("", &toml::Value::Table(env.clone()), &mut keys);
    sources.extend(keys.drain(..).map(|k| (k, Source::Env)));

    merge(&mut merged, file);
    merge(&mut merged, env);
    merged.insert("profile".into(), toml::Value::String(profile.name().into()));
    let config: RunConfig = toml::Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| Error::invalid(format!("config schema: {e}")))?;
    config.validate()?;
    Ok(LoadedConfig { config, sources })
}
