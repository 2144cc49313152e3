use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use clrm_core::clrm::{self, planned_ledger, Ledger};
use clrm_core::config::{load_config, LoadedConfig, Profile, RunConfig, Source};
use clrm_core::geostat::{Geomodel, PcaBasis};
use clrm_core::hm::{self, ObservationSet};
use clrm_core::proxy::{self, build_proxy, make_dataset, Dataset, DatasetSpec, ProxyModel, Split};
use clrm_core::resim::{self, BhpSchedule};
use clrm_core::robustopt::{
    robust_eval, robust_optimize, trim_count, write_trace_csv, ProxyEvaluator, RateEvaluator, SimulatorEvaluator,
};
use clrm_core::{rng, Error, Result};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "clrm",
    version,
    about = "Closed-loop reservoir management with a CNN-RNN rate proxy"
)]
struct Cli {
    /// TOML run configuration laid over the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Built-in defaults to start from: desk or paper.
    #[arg(long, global = true)]
    profile: Option<Profile>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the PCA and truth realizations into <out>/models.
    GenerateModels,
    /// Build the PCA basis from the PCA realizations.
    BuildPca {
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Simulate one geomodel under a schedule.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        /// Schedule CSV (default: every well at mid-bounds).
        #[arg(long)]
        schedule: Option<PathBuf>,
    },
    /// Simulate random schedules on the prior ensemble.
    MakeDataset {
        #[arg(long)]
        models: Option<PathBuf>,
        /// Schedule whose first `fixed_steps` steps every sample keeps.
        #[arg(long)]
        prefix: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        fixed_steps: usize,
        /// Use the retraining sample counts.
        #[arg(long)]
        retrain: bool,
    },
    /// Train the proxy, or continue training an existing one.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        models: Option<PathBuf>,
        /// Proxy to continue from at the retraining learning rate.
        #[arg(long)]
        warm_start: Option<PathBuf>,
    },
    /// Proxy error on a dataset split with P10/P50/P90 of the per-sample errors.
    EvalProxy {
        #[arg(long)]
        proxy: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Robust optimization of the free control steps.
    Optimize {
        #[arg(long)]
        proxy: Option<PathBuf>,
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        prefix: Option<PathBuf>,
        /// 0-based first optimized control step.
        #[arg(long, default_value_t = 0)]
        first_free: usize,
        /// Evaluate schedules with the simulator instead of the proxy.
        #[arg(long)]
        simulator: bool,
    },
    /// RML posterior ensemble from observed rates.
    HistoryMatch {
        #[arg(long)]
        pca: Option<PathBuf>,
        /// Operated schedule (default: mid-bounds).
        #[arg(long)]
        schedule: Option<PathBuf>,
        /// Observation set JSON; otherwise synthesized from --truth.
        #[arg(long)]
        observations: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Last observation day when synthesizing observations.
        #[arg(long, default_value_t = 180.0)]
        window_end: f64,
    },
    /// Full closed loop.
    Clrm,
    /// Print the simulation ledger of a run, or the planned ledger of the configuration.
    Report {
        #[arg(long)]
        run: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    kind: &'a str,
    message: String,
    exit_code: u8,
}

fn classify(e: &Error) -> (&'static str, u8) {
    if e.is_numerical() {
        ("numerical", 3)
    } else if e.is_config() {
        ("config", 2)
    } else {
        match root(e) {
            Error::Io { .. } => ("io", 2),
            Error::Format { .. } | Error::Json(_) => ("format", 2),
            _ => ("config", 2),
        }
    }
}

fn root(e: &Error) -> &Error {
    match e {
        Error::Context { source, .. } => root(source),
        _ => e,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = classify(&e);
            let body = serde_json::json!({ "error": ErrorBody { kind, message: e.to_string(), exit_code: code } });
            eprintln!("{body}");
            ExitCode::from(code)
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out.join(default))
    }

    fn schedule(&self, path: &Option<PathBuf>) -> Result<BhpSchedule> {
        match path {
            Some(p) => {
                let u = BhpSchedule::read_csv(
                    p,
                    &self.cfg.wells,
                    self.cfg.controls.control_duration,
                    &self.cfg.bhp_bounds(),
                )?;
                if u.n_steps() != self.cfg.controls.n_steps {
                    return Err(Error::shape("schedule steps", self.cfg.controls.n_steps, u.n_steps()));
                }
                Ok(u)
            }
            None => Ok(self.cfg.base_schedule()),
        }
    }

    /// The first `n_prior` models of a directory.
    fn prior(&self, dir: &Path) -> Result<Vec<Geomodel>> {
        let mut all = load_models(dir)?;
        let n = self.cfg.ensemble.n_prior;
        if all.len() < n {
            return Err(Error::invalid(format!(
                "{} holds {} models, need {n}",
                dir.display(),
                all.len()
            )));
        }
        all.truncate(n);
        Ok(all)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    write(path, &serde_json::to_string_pretty(v)?)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// `model_NNNN.bin` files of a directory in name order.
fn load_models(dir: &Path) -> Result<Vec<Geomodel>> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("model_") && n.ends_with(".bin"))
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::invalid(format!("no model_*.bin files in {}", dir.display())));
    }
    names.iter().map(|p| Geomodel::load_binary(p)).collect()
}

fn save_models(dir: &Path, models: &[Geomodel]) -> Result<()> {
    create_dir(dir)?;
    for (i, m) in models.iter().enumerate() {
        m.save_binary(&dir.join(format!("model_{i:04}.bin")))?;
    }
    Ok(())
}

fn load_basis(path: &Path) -> Result<PcaBasis> {
    read_json(path)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::invalid("--threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    }
    let LoadedConfig {
        mut config,
        mut sources,
    } = load_config(cli.config.as_deref(), cli.profile, std::env::vars())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
        sources.insert("seed".into(), Source::File);
    }
    create_dir(&cli.out)?;
    config.save(&cli.out.join("config.toml"))?;
    write_json(&cli.out.join("config_sources.json"), &sources)?;
    let ctx = Ctx {
        cfg: config,
        out: cli.out,
    };
    match &cli.command {
        Command::GenerateModels => generate_models(&ctx),
        Command::BuildPca { models } => build_pca(&ctx, &ctx.path(models, "models")),
        Command::Simulate { model, schedule } => simulate(&ctx, model, schedule),
        Command::MakeDataset {
            models,
            prefix,
            fixed_steps,
            retrain,
        } => make_dataset_cmd(&ctx, &ctx.path(models, "models"), prefix, *fixed_steps, *retrain),
        Command::Train {
            dataset,
            models,
            warm_start,
        } => train(
            &ctx,
            &ctx.path(dataset, "dataset"),
            &ctx.path(models, "models"),
            warm_start,
        ),
        Command::EvalProxy {
            proxy,
            dataset,
            models,
            split,
        } => eval_proxy(
            &ctx,
            &ctx.path(proxy, "proxy"),
            &ctx.path(dataset, "dataset"),
            &ctx.path(models, "models"),
            *split,
        ),
        Command::Optimize {
            proxy,
            models,
            prefix,
            first_free,
            simulator,
        } => optimize(
            &ctx,
            &ctx.path(proxy, "proxy"),
            &ctx.path(models, "models"),
            prefix,
            *first_free,
            *simulator,
        ),
        Command::HistoryMatch {
            pca,
            schedule,
            observations,
            truth,
            window_end,
        } => history_match(
            &ctx,
            &ctx.path(pca, "pca.json"),
            schedule,
            observations,
            truth,
            *window_end,
        ),
        Command::Clrm => run_clrm(&ctx),
        Command::Report { run } => report(&ctx, run),
    }
}

#[derive(Serialize)]
struct ModelsManifest {
    seed: u64,
    n_pca: usize,
    n_truth: usize,
    hard_data_cells: usize,
}

fn generate_models(ctx: &Ctx) -> Result<()> {
    let r = clrm::generate_realizations(&ctx.cfg)?;
    let dir = ctx.out.join("models");
    save_models(&dir, &r.models)?;
    write_json(&dir.join("hard_data.json"), &r.hard_data)?;
    write_json(
        &dir.join("manifest.json"),
        &ModelsManifest {
            seed: ctx.cfg.seed,
            n_pca: r.n_pca,
            n_truth: r.models.len() - r.n_pca,
            hard_data_cells: r.hard_data.points.len(),
        },
    )?;
    println!("wrote {} realizations to {}", r.models.len(), dir.display());
    Ok(())
}

fn build_pca(ctx: &Ctx, models: &Path) -> Result<()> {
    let all = load_models(models)?;
    let n = ctx.cfg.ensemble.n_pca;
    if all.len() < n {
        return Err(Error::invalid(format!(
            "{} holds {} models, need {n}",
            models.display(),
            all.len()
        )));
    }
    let b = clrm::build_basis(&ctx.cfg, &all[..n])?;
    write_json(&ctx.out.join("pca.json"), &b)?;
    println!(
        "latent dimension {} retaining {:.4} of the energy",
        b.l, b.energy_fraction
    );
    Ok(())
}

fn simulate(ctx: &Ctx, model: &Path, schedule: &Option<PathBuf>) -> Result<()> {
    let m = Geomodel::load_binary(model)?;
    let u = ctx.schedule(schedule)?;
    let r = resim::simulate(&m, &ctx.cfg.fluid, &ctx.cfg.wells, &u, &ctx.cfg.numerics)?;
    let path = ctx.out.join("rates.csv");
    r.write_csv(&ctx.cfg.wells, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn make_dataset_cmd(
    ctx: &Ctx,
    models: &Path,
    prefix: &Option<PathBuf>,
    fixed_steps: usize,
    retrain: bool,
) -> Result<()> {
    let cfg = &ctx.cfg;
    let prior = ctx.prior(models)?;
    let refs: Vec<&Geomodel> = prior.iter().collect();
    let ids: Vec<usize> = (0..prior.len()).collect();
    let (n_train, n_test) = if retrain {
        (cfg.proxy.retrain_train_per_model, cfg.proxy.retrain_test_per_model)
    } else {
        (cfg.proxy.n_train_per_model, cfg.proxy.n_test_per_model)
    };
    let spec = DatasetSpec {
        n_train_per_model: n_train,
        n_test_per_model: n_test,
        fixed_steps,
        seed: rng::derive_seed(cfg.seed, &[rng::tag::SCHEDULE, fixed_steps as u64]),
    };
    let u = ctx.schedule(prefix)?;
    let ds = make_dataset(&refs, &ids, &cfg.fluid, &cfg.wells, &u, &spec, &cfg.numerics)?;
    let dir = ctx.out.join("dataset");
    ds.save(&dir)?;
    println!("wrote {} samples to {}", ds.len(), dir.display());
    Ok(())
}

fn dataset_models(ds: &Dataset, models: &Path) -> Result<Vec<Geomodel>> {
    let all = load_models(models)?;
    ds.realization_ids
        .iter()
        .map(|&id| {
            all.get(id).cloned().ok_or_else(|| {
                Error::invalid(format!(
                    "dataset refers to model {id} missing from {}",
                    models.display()
                ))
            })
        })
        .collect()
}

fn train(ctx: &Ctx, dataset: &Path, models: &Path, warm_start: &Option<PathBuf>) -> Result<()> {
    let cfg = &ctx.cfg;
    let ds = Dataset::load(dataset)?;
    let ms = dataset_models(&ds, models)?;
    let refs: Vec<&Geomodel> = ms.iter().collect();
    let (model, hist) = match warm_start {
        Some(dir) => {
            let mut m = ProxyModel::load(dir)?;
            let h = proxy::retrain(&mut m, &ds, &refs, &cfg.proxy.retrain, &cfg.proxy.error)?;
            (m, h)
        }
        None => {
            let mut m = build_proxy(&cfg.proxy_config(), rng::derive_seed(cfg.seed, &[rng::tag::PROXY_INIT]))?;
            let h = proxy::train(&mut m, &ds, &refs, &cfg.proxy.train, &cfg.proxy.error)?;
            (m, h)
        }
    };
    model.save(&ctx.out.join("proxy"))?;
    hist.write_csv(&ctx.out.join("training_history.csv"))?;
    let last = hist.final_row();
    println!(
        "epochs {} stop {:?} E_train {:.4}",
        hist.epochs(),
        hist.stop,
        last.e_train
    );
    if let Some(e) = last.e_test {
        println!("E_test {e:.4}");
    }
    Ok(())
}

fn eval_proxy(ctx: &Ctx, proxy_dir: &Path, dataset: &Path, models: &Path, split: SplitArg) -> Result<()> {
    let model = ProxyModel::load(proxy_dir)?;
    let ds = Dataset::load(dataset)?;
    let ms = dataset_models(&ds, models)?;
    let refs: Vec<&Geomodel> = ms.iter().collect();
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let rep = proxy::evaluate_split(&model, &ds, &refs, split, &ctx.cfg.proxy.error)?;
    rep.write(&ds, &ctx.out)?;
    println!("E = {:.6}", rep.e);
    println!("P10 = {:.6}  P50 = {:.6}  P90 = {:.6}", rep.p10, rep.p50, rep.p90);
    Ok(())
}

#[derive(Serialize)]
struct OptimizeReport {
    evaluator: &'static str,
    first_free: usize,
    expected_npv: f64,
    h: f64,
    npvs: Vec<f64>,
    kept: Vec<usize>,
    constraint_max: Vec<f64>,
    evaluations: usize,
}

fn optimize(
    ctx: &Ctx,
    proxy_dir: &Path,
    models: &Path,
    prefix: &Option<PathBuf>,
    first_free: usize,
    simulator: bool,
) -> Result<()> {
    let cfg = &ctx.cfg;
    let ens = ctx.prior(models)?;
    let refs: Vec<&Geomodel> = ens.iter().collect();
    let u0 = ctx.schedule(prefix)?;
    let seed = rng::derive_seed(cfg.seed, &[rng::tag::PSO_PARTICLE, first_free as u64]);
    let model;
    let (evaluator, name): (Box<dyn RateEvaluator + '_>, &str) = if simulator {
        (
            Box::new(SimulatorEvaluator {
                models: refs.clone(),
                fluid: &cfg.fluid,
                wells: &cfg.wells,
                numerics: &cfg.numerics,
            }),
            "simulator",
        )
    } else {
        model = ProxyModel::load(proxy_dir)?;
        (
            Box::new(ProxyEvaluator {
                proxy: &model,
                models: refs.clone(),
            }),
            "proxy",
        )
    };
    let res = robust_optimize(
        evaluator.as_ref(),
        &cfg.economics,
        &cfg.constraints,
        &u0,
        first_free,
        &cfg.optimization,
        seed,
    )?;
    let rates = evaluator.evaluate(std::slice::from_ref(&res.schedule))?.remove(0);
    let ev = robust_eval(
        &rates,
        &cfg.economics,
        &cfg.constraints,
        trim_count(refs.len(), cfg.optimization.trim_fraction)?,
    )?;
    res.schedule
        .write_csv(&cfg.wells, &ctx.out.join("optimized_schedule.csv"))?;
    write_trace_csv(&res.trace, &ctx.out.join("pso_trace.csv"))?;
    write_json(
        &ctx.out.join("optimize.json"),
        &OptimizeReport {
            evaluator: name,
            first_free,
            expected_npv: -ev.j,
            h: res.h,
            npvs: ev.npvs,
            kept: ev.kept,
            constraint_max: ev.c,
            evaluations: res.evaluations,
        },
    )?;
    println!("expected NPV {:.2} USD, h = {}", -ev.j, res.h);
    Ok(())
}

fn history_match(
    ctx: &Ctx,
    pca: &Path,
    schedule: &Option<PathBuf>,
    observations: &Option<PathBuf>,
    truth: &Option<PathBuf>,
    window_end: f64,
) -> Result<()> {
    let cfg = &ctx.cfg;
    let basis = load_basis(pca)?;
    let u = ctx.schedule(schedule)?;
    let obs: ObservationSet = match (observations, truth) {
        (Some(p), _) => read_json(p)?,
        (None, Some(t)) => {
            let m = Geomodel::load_binary(t)?;
            let hmc = &cfg.history_matching;
            let times = hm::observation_times(window_end, hmc.observation_interval);
            if times.is_empty() {
                return Err(Error::invalid("observation window holds no observation times"));
            }
            let r = resim::Simulator::new(&m, &cfg.fluid, &cfg.wells, &cfg.numerics)?
                .run(&u, window_end)?
                .rates;
            let (d, labels) = hm::extract_data(&r, &cfg.wells, &times)?;
            let seed = rng::derive_seed(cfg.seed, &[rng::tag::MEASUREMENT]);
            hm::perturb_observations(&d, labels, times, &hmc.noise, hmc.noise_scale, seed)
        }
        (None, None) => return Err(Error::invalid("history-match needs --observations or --truth")),
    };
    write_json(&ctx.out.join("observations.json"), &obs)?;
    let seed = rng::derive_seed(cfg.seed, &[rng::tag::RML]);
    let (models, report) = clrm::history_match(cfg, &basis, &obs, &u, seed)?;
    let dir = ctx.out.join("posterior");
    hm::save_posterior(&dir, &models, &report)?;
    println!(
        "{} observations, {} runs, mismatch decreased in {:.0}% of runs, {} simulations",
        obs.len(),
        report.runs.len(),
        100.0 * report.improved_fraction(),
        report.total_simulations
    );
    Ok(())
}

fn run_clrm(ctx: &Ctx) -> Result<()> {
    let o = clrm::run_clrm(&ctx.cfg, Some(&ctx.out))?;
    for c in &o.summary.cycles {
        println!(
            "cycle {}: expected NPV proxy {:.0} simulator {:.0}, truth {:.0}, h = {}",
            c.cycle, c.proxy_expected_npv, c.simulator_expected_npv, c.truth_npv, c.h
        );
    }
    if let Some(r) = o.summary.ledger.as_ref().and_then(|l| l.report.as_ref()) {
        for line in r.lines() {
            println!("{line}");
        }
    }
    Ok(())
}

fn report(ctx: &Ctx, run: &Option<PathBuf>) -> Result<()> {
    let (r, source) = match run {
        Some(dir) => {
            let ledger: Ledger = read_json(&dir.join("ledger.json"))?;
            let r = ledger
                .report
                .ok_or_else(|| Error::format(dir.join("ledger.json"), "ledger has no report"))?;
            (r, "run")
        }
        None => (planned_ledger(&ctx.cfg), "planned"),
    };
    let lines = r.lines();
    let mut text = format!("ledger ({source})\n");
    for l in &lines {
        text.push_str(l);
        text.push('\n');
    }
    print!("{text}");
    write(&ctx.out.join("report.txt"), &text)?;
    write_json(&ctx.out.join("report.json"), &r)
}
