use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geostat::{Geomodel, GridSpec};
use crate::nn::{self, BatchStats, CellActivation, Graph, ParamStore, Tensor, Var, BN_EPS};
use crate::resim::{BhpSchedule, RateSeries};
use crate::rng;

/// Architecture of the CNN-RNN proxy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxyConfig {
    /// Geomodel grid extents.
    pub grid: [usize; 3],
    /// Zero-pad the CNN input up to the next multiple of 8 on each axis.
    #[serde(default)]
    pub pad_to_multiple_of_8: bool,
    pub channels: [usize; 3],
    pub n_neu: usize,
    pub n_t: usize,
    pub report_interval: f64,
    pub injectors: Vec<String>,
    pub producers: Vec<String>,
    /// Well names in schedule row order; fixes the input column order.
    pub schedule_wells: Vec<String>,
    #[serde(default)]
    pub cell_activation: CellActivation,
}

impl ProxyConfig {
    pub fn new(grid: [usize; 3], n_neu: usize, n_t: usize, injectors: Vec<String>, producers: Vec<String>) -> Self {
        let schedule_wells = injectors.iter().chain(&producers).cloned().collect();
        ProxyConfig {
            grid,
            pad_to_multiple_of_8: false,
            channels: [4, 8, 16],
            n_neu,
            n_t,
            report_interval: 30.0,
            injectors,
            producers,
            schedule_wells,
            cell_activation: CellActivation::Relu,
        }
    }

    pub fn n_in(&self) -> usize {
        self.schedule_wells.len()
    }

    pub fn n_out(&self) -> usize {
        self.injectors.len() + 2 * self.producers.len()
    }

    /// Extents seen by the CNN.
    pub fn cnn_dims(&self) -> [usize; 3] {
        if self.pad_to_multiple_of_8 {
            self.grid.map(|d| d.div_ceil(8) * 8)
        } else {
            self.grid
        }
    }

    pub fn flatten_size(&self) -> usize {
        let d = self.cnn_dims();
        (d[0] / 8) * (d[1] / 8) * (d[2] / 8) * self.channels[2]
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.cnn_dims();
        if d.iter().any(|&v| v == 0 || v % 8 != 0) {
            return Err(Error::invalid(format!(
                "proxy grid {:?} must be divisible by 8 on every axis (three pooling layers)",
                self.grid
            )));
        }
        if self.n_neu == 0 || self.n_t < 2 || self.channels.contains(&0) {
            return Err(Error::invalid("proxy needs N_neu >= 1, N_t >= 2 and nonzero channels"));
        }
        if self.n_in() == 0 || self.n_out() == 0 {
            return Err(Error::invalid("proxy needs at least one well"));
        }
        let expected = self.injectors.len() + self.producers.len();
        if self.n_in() != expected {
            return Err(Error::shape("proxy schedule wells", expected, self.n_in()));
        }
        Ok(())
    }

    pub fn report_times(&self) -> Vec<f64> {
        (0..self.n_t).map(|t| t as f64 * self.report_interval).collect()
    }

    /// Trainable-parameter count implied by the architecture.
    pub fn closed_form_param_count(&self) -> usize {
        let [c1, c2, c3] = self.channels;
        let conv = |cin: usize, cout: usize| 27 * cin * cout + cout;
        let n = self.n_neu;
        let fc = self.flatten_size() * n + n;
        conv(1, c1)
            + conv(c1, c2)
            + conv(c2, c3)
            + 2 * (c1 + c2 + c3)
            + 2 * fc
            + 4 * ((self.n_in() + n) * n + n)
            + n * self.n_out()
            + self.n_out()
    }
}

/// Frozen input/output scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub logk_mean: f64,
    pub logk_sd: f64,
    /// Per schedule row (lower, upper) in bar.
    pub bhp_bounds: Vec<(f64, f64)>,
    /// Per output stream, m³/day.
    pub out_scale: Vec<f64>,
}

impl Normalization {
    /// Statistics from training models and rates.
    pub fn fit(models: &[&Geomodel], rates: &[&RateSeries], bhp_bounds: Vec<(f64, f64)>) -> Result<Self> {
        if models.is_empty() || rates.is_empty() {
            return Err(Error::invalid("normalization needs training data"));
        }
        let n: usize = models.iter().map(|m| m.logk.len()).sum();
        let mean = models.iter().flat_map(|m| m.logk.iter()).sum::<f64>() / n as f64;
        let var = models
            .iter()
            .flat_map(|m| m.logk.iter())
            .map(|v| (v - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        let n_out = rates[0].n_streams();
        let mut out_scale = vec![0.0f64; n_out];
        for r in rates {
            for (s, stream) in out_scale.iter_mut().zip(r.streams()) {
                *s = stream.iter().fold(*s, |a, &b| a.max(b));
            }
        }
        for s in &mut out_scale {
            if *s <= 0.0 {
                *s = 1.0;
            }
        }
        Ok(Normalization {
            logk_mean: mean,
            logk_sd: if var > 0.0 { var.sqrt() } else { 1.0 },
            bhp_bounds,
            out_scale,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Proxy parameters, batch-normalization buffers and normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyModel {
    pub config: ProxyConfig,
    pub store: ParamStore,
    pub norm: Option<Normalization>,
}

const CONV: [&str; 3] = ["conv1", "conv2", "conv3"];
const BN: [&str; 3] = ["bn1", "bn2", "bn3"];

fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-limit..limit)).collect()
}

/// Builds and initializes the proxy network.
pub fn build_proxy(cfg: &ProxyConfig, seed: u64) -> Result<ProxyModel> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, &[rng::tag::PROXY_INIT]);
    let mut s = ParamStore::new();
    let mut cin = 1;
    for (l, &cout) in cfg.channels.iter().enumerate() {
        let w = glorot(&mut rng, 27 * cin, 27 * cout, 27 * cin * cout);
        s.add(&format!("{}.w", CONV[l]), vec![3, 3, 3, cin, cout], w, true)?;
        s.add(&format!("{}.b", CONV[l]), vec![cout], vec![0.0; cout], true)?;
        s.add(&format!("{}.gamma", BN[l]), vec![cout], vec![1.0; cout], true)?;
        s.add(&format!("{}.beta", BN[l]), vec![cout], vec![0.0; cout], true)?;
        s.add(&format!("{}.running_mean", BN[l]), vec![cout], vec![0.0; cout], false)?;
        s.add(&format!("{}.running_var", BN[l]), vec![cout], vec![1.0; cout], false)?;
        cin = cout;
    }
    let (f, n) = (cfg.flatten_size(), cfg.n_neu);
    for name in ["fc1", "fc2"] {
        s.add(&format!("{name}.w"), vec![f, n], glorot(&mut rng, f, n, f * n), true)?;
        s.add(&format!("{name}.b"), vec![n], vec![0.0; n], true)?;
    }
    let nin = cfg.n_in();
    s.add(
        "lstm.wx",
        vec![nin, 4 * n],
        glorot(&mut rng, nin, 4 * n, nin * 4 * n),
        true,
    )?;
    s.add("lstm.wh", vec![n, 4 * n], glorot(&mut rng, n, 4 * n, n * 4 * n), true)?;
    s.add("lstm.b", vec![4 * n], vec![0.0; 4 * n], true)?;
    let nout = cfg.n_out();
    s.add("fc3.w", vec![n, nout], glorot(&mut rng, n, nout, n * nout), true)?;
    s.add("fc3.b", vec![nout], vec![0.0; nout], true)?;
    Ok(ProxyModel {
        config: cfg.clone(),
        store: s,
        norm: None,
    })
}

/// Inputs for one batched forward pass.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Distinct geomodels, normalized and laid out for the CNN: (U, X, Y, Z, 1).
    pub models: Tensor,
    /// Geomodel row for each sample.
    pub sample_model: Vec<usize>,
    /// Per time step, a (B, N_in) matrix of normalized BHPs.
    pub controls: Vec<Tensor>,
}

impl Batch {
    pub fn n_samples(&self) -> usize {
        self.sample_model.len()
    }
}

/// Output of a forward pass: predictions in normalized units, rows ordered (t, sample).
pub struct Forward {
    pub pred: Var,
    pub bn_stats: Vec<BatchStats>,
}

impl ProxyModel {
    pub fn n_params(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn normalization(&self) -> Result<&Normalization> {
        self.norm
            .as_ref()
            .ok_or_else(|| Error::invalid("proxy has no normalization statistics; train it first"))
    }

    fn id(&self, name: &str) -> usize {
        self.store.id(name).expect("parameter created by build_proxy")
    }

    /// CNN input tensor for distinct geomodels.
    pub fn model_tensor(&self, models: &[&Geomodel]) -> Result<Tensor> {
        let norm = self.normalization()?;
        let [gx, gy, gz] = self.config.grid;
        let [px, py, pz] = self.config.cnn_dims();
        let mut data = vec![0.0; models.len() * px * py * pz];
        for (u, m) in models.iter().enumerate() {
            if [m.grid.nx, m.grid.ny, m.grid.nz] != self.config.grid {
                return Err(Error::invalid(format!(
                    "geomodel grid {}x{}x{} differs from proxy grid {:?}",
                    m.grid.nx, m.grid.ny, m.grid.nz, self.config.grid
                )));
            }
            let base = u * px * py * pz;
            for k in 0..gz {
                for j in 0..gy {
                    for i in 0..gx {
                        let v = m.logk[i + gx * (j + gy * k)];
                        data[base + (i * py + j) * pz + k] = (v - norm.logk_mean) / norm.logk_sd;
                    }
                }
            }
        }
        Tensor::new(vec![models.len(), px, py, pz, 1], data)
    }

    /// Normalized BHP inputs, one (B, N_in) matrix per report time.
    pub fn control_tensors(&self, schedules: &[&BhpSchedule]) -> Result<Vec<Tensor>> {
        let norm = self.normalization()?;
        let nin = self.config.n_in();
        for u in schedules {
            if u.n_wells() != nin {
                return Err(Error::shape("proxy schedule wells", nin, u.n_wells()));
            }
        }
        let mut out = Vec::with_capacity(self.config.n_t);
        for t in self.config.report_times() {
            let mut data = Vec::with_capacity(schedules.len() * nin);
            for u in schedules {
                let step = u.step_for_report(t);
                for (w, &(lo, hi)) in norm.bhp_bounds.iter().enumerate() {
                    let span = hi - lo;
                    let v = u.bhp[w][step];
                    data.push(if span > 0.0 { (v - lo) / span } else { 0.5 });
                }
            }
            out.push(Tensor::new(vec![schedules.len(), nin], data)?);
        }
        Ok(out)
    }

    /// Assembles a batch; `pairs` are (model index, schedule index).
    pub fn batch(&self, models: &[&Geomodel], schedules: &[&BhpSchedule], pairs: &[(usize, usize)]) -> Result<Batch> {
        let mut used: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        used.sort_unstable();
        used.dedup();
        let distinct: Vec<&Geomodel> = used.iter().map(|&i| models[i]).collect();
        let sample_model = pairs
            .iter()
            .map(|p| used.binary_search(&p.0).expect("model index collected above"))
            .collect();
        let scheds: Vec<&BhpSchedule> = pairs.iter().map(|p| schedules[p.1]).collect();
        Ok(Batch {
            models: self.model_tensor(&distinct)?,
            sample_model,
            controls: self.control_tensors(&scheds)?,
        })
    }

    fn p(&self, g: &mut Graph, name: &str, grad: bool) -> Var {
        let id = self.id(name);
        if grad {
            g.param(&self.store, id)
        } else {
            let e = &self.store.entries[id];
            g.input(Tensor {
                shape: e.shape.clone(),
                data: e.value.clone(),
            })
        }
    }

    /// Builds the forward graph. With `grad`, trainable parameters become
    /// differentiable leaves.
    pub fn forward_graph(&self, g: &mut Graph, batch: &Batch, mode: BnMode, grad: bool) -> Result<Forward> {
        let cfg = &self.config;
        let mut x = g.input(batch.models.clone());
        let mut stats = Vec::new();
        for l in 0..3 {
            let w = self.p(g, &format!("{}.w", CONV[l]), grad);
            let b = self.p(g, &format!("{}.b", CONV[l]), grad);
            let gamma = self.p(g, &format!("{}.gamma", BN[l]), grad);
            let beta = self.p(g, &format!("{}.beta", BN[l]), grad);
            let y = g.conv3d(x, w, b)?;
            let y = match mode {
                BnMode::Train => {
                    let (y, s) = g.batchnorm_train(y, gamma, beta, BN_EPS)?;
                    stats.push(s);
                    y
                }
                BnMode::Infer => {
                    let mean = self.store.value(self.id(&format!("{}.running_mean", BN[l]))).to_vec();
                    let var = self.store.value(self.id(&format!("{}.running_var", BN[l]))).to_vec();
                    g.batchnorm_infer(y, gamma, beta, &mean, &var, BN_EPS)?
                }
            };
            let y = g.relu(y);
            x = g.maxpool3d(y)?;
        }
        let u = batch.models.shape[0];
        let flat = g.reshape(x, vec![u, cfg.flatten_size()])?;
        let dense = |g: &mut Graph, name: &str, input: Var| -> Result<Var> {
            let w = self.p(g, &format!("{name}.w"), grad);
            let b = self.p(g, &format!("{name}.b"), grad);
            let y = g.matmul(input, w)?;
            g.add_bias(y, b)
        };
        let c0 = dense(g, "fc1", flat)?;
        let h0 = dense(g, "fc2", flat)?;
        let mut c = g.gather_rows(c0, &batch.sample_model)?;
        let mut h = g.gather_rows(h0, &batch.sample_model)?;

        let wx = self.p(g, "lstm.wx", grad);
        let wh = self.p(g, "lstm.wh", grad);
        let lb = self.p(g, "lstm.b", grad);
        let n = cfg.n_neu;
        let mut hs = Vec::with_capacity(cfg.n_t);
        if batch.controls.len() != cfg.n_t {
            return Err(Error::shape("proxy controls", cfg.n_t, batch.controls.len()));
        }
        for xt in &batch.controls {
            let xv = g.input(xt.clone());
            let zx = g.matmul(xv, wx)?;
            let zh = g.matmul(h, wh)?;
            let z = g.add(zx, zh)?;
            let z = g.add_bias(z, lb)?;
            let hc = g.lstm_cell(z, c, cfg.cell_activation)?;
            h = g.slice_cols(hc, 0, n)?;
            c = g.slice_cols(hc, n, n)?;
            hs.push(h);
        }
        let all = g.concat_rows(&hs)?;
        let pred = dense(g, "fc3", all)?;
        Ok(Forward { pred, bn_stats: stats })
    }

    /// Converts normalized predictions (rows ordered (t, sample)) into rate series.
    pub fn to_rates(&self, pred: &Tensor, n_samples: usize, clamp: bool) -> Result<Vec<RateSeries>> {
        let norm = self.normalization()?;
        let cfg = &self.config;
        let nout = cfg.n_out();
        let (ni, np) = (cfg.injectors.len(), cfg.producers.len());
        let times = cfg.report_times();
        let mut out = Vec::with_capacity(n_samples);
        for b in 0..n_samples {
            let mut r = RateSeries {
                report_times: times.clone(),
                injector_names: cfg.injectors.clone(),
                producer_names: cfg.producers.clone(),
                inj_water: vec![vec![0.0; cfg.n_t]; ni],
                prod_oil: vec![vec![0.0; cfg.n_t]; np],
                prod_water: vec![vec![0.0; cfg.n_t]; np],
            };
            for t in 0..cfg.n_t {
                let row = &pred.data[(t * n_samples + b) * nout..(t * n_samples + b + 1) * nout];
                for (o, stream) in r.streams_mut().enumerate() {
                    let v = row[o] * norm.out_scale[o];
                    stream[t] = if clamp { v.max(0.0) } else { v };
                }
            }
            out.push(r);
        }
        Ok(out)
    }

    /// Predicted rates (clamped at zero) for each (model, schedule) pair.
    pub fn predict(
        &self,
        models: &[&Geomodel],
        schedules: &[&BhpSchedule],
        pairs: &[(usize, usize)],
    ) -> Result<Vec<RateSeries>> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let batch = self.batch(models, schedules, pairs)?;
        let mut g = Graph::new();
        let f = self.forward_graph(&mut g, &batch, BnMode::Infer, false)?;
        let pred = g.value(f.pred);
        if !pred.is_finite() {
            return Err(Error::NonFinite("proxy prediction".into()));
        }
        self.to_rates(pred, pairs.len(), true)
    }

    /// Single-sample forward.
    pub fn forward(&self, m: &Geomodel, u: &BhpSchedule) -> Result<RateSeries> {
        Ok(self.predict(&[m], &[u], &[(0, 0)])?.pop().expect("one sample"))
    }

    /// Replaces the running statistics of every batch-normalization layer.
    pub fn set_running_stats(&mut self, stats: &[BatchStats]) {
        for (l, s) in stats.iter().enumerate() {
            let mid = self.id(&format!("{}.running_mean", BN[l]));
            let vid = self.id(&format!("{}.running_var", BN[l]));
            self.store.value_mut(mid).clone_from(&s.mean);
            self.store.value_mut(vid).clone_from(&s.var);
        }
    }

    /// Momentum update of the running statistics.
    pub fn update_running_stats(&mut self, stats: &[BatchStats], momentum: f64) {
        for (l, s) in stats.iter().enumerate() {
            let mid = self.id(&format!("{}.running_mean", BN[l]));
            let vid = self.id(&format!("{}.running_var", BN[l]));
            for (r, b) in self.store.value_mut(mid).iter_mut().zip(&s.mean) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
            for (r, b) in self.store.value_mut(vid).iter_mut().zip(&s.var) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
        }
    }

    fn header(&self) -> serde_json::Value {
        serde_json::json!({
            "proxy_config": self.config,
            "normalization": self.norm,
        })
    }

    /// Writes `proxy.ckpt` and `proxy_manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        nn::save_checkpoint(&dir.join("proxy.ckpt"), &self.store, self.header())?;
        nn::write_manifest_json(&dir.join("proxy_manifest.json"), &self.store, self.header())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("proxy.ckpt");
        let (store, header) = nn::load_checkpoint(&path)?;
        let config: ProxyConfig = serde_json::from_value(header["proxy_config"].clone())?;
        let norm: Option<Normalization> = serde_json::from_value(header["normalization"].clone())?;
        let fresh = build_proxy(&config, 0)?;
        let layout_ok = fresh.store.entries.len() == store.entries.len()
            && fresh
                .store
                .entries
                .iter()
                .zip(&store.entries)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape && a.trainable == b.trainable);
        if !layout_ok {
            return Err(Error::format(
                &path,
                "checkpoint layout does not match its configuration",
            ));
        }
        Ok(ProxyModel { config, store, norm })
    }
}

/// Grid extents of a geomodel as a proxy grid triple.
pub fn grid_dims(g: &GridSpec) -> [usize; 3] {
    [g.nx, g.ny, g.nz]
}
