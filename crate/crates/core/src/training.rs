//! Loss, batch gradients, Adam and the offline/online training loops.
//!
//! Batches are never stored: sample `i` of iteration `k` is regenerated from
//! stream `k * batch + i` of the training domain, so a run is a pure
//! function of its config.

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    mmnet_full_forward, mmnet_full_loss_grad, mmnet_iid_forward, mmnet_iid_loss_grad, oampnet_forward,
    oampnet_loss_grad,
};
use crate::channel::{draw_sample, gen_iid, noise_var_for_snr, ChannelSource, KroneckerModel, Sample};
use crate::constellation::Constellation;
use crate::detection::{DetectionTrace, NetworkKind};
use crate::error::{Error, Result};
use crate::numerics::{norm_sqr, sub_vec, truncated_svd, ComplexMatrix, SvdFactors};
use crate::params::{init_params, DetectorParams, Dims};
use crate::rng::{stream, INIT_DOMAIN, TRAIN_DOMAIN};
use crate::unrolled::{improved_vbinet_forward, improved_vbinet_loss_grad, vbinet_forward, vbinet_loss_grad};

/// Layer-averaged squared error of a trace against the transmitted vector.
pub fn loss(trace: &DetectionTrace, x_true: &[Complex64], layers: usize) -> Result<f64> {
    if trace.layers() != layers || layers == 0 {
        return Err(Error::Dimension(format!("trace has {} layers, expected {layers}", trace.layers())));
    }
    if trace.outputs().iter().any(|x| x.len() != x_true.len()) {
        return Err(Error::Dimension("layer output length differs from x_true".into()));
    }
    let total: f64 = trace.outputs().iter().map(|x| norm_sqr(&sub_vec(x, x_true))).sum();
    Ok(total / layers as f64)
}

/// One supervised example: the channel, its SVD when the detector needs it,
/// and the transmission.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub h: ComplexMatrix,
    pub svd: Option<SvdFactors>,
    pub sample: Sample,
}

impl TrainingSample {
    pub fn new(kind: NetworkKind, h: ComplexMatrix, sample: Sample) -> Result<Self> {
        let svd = match kind {
            NetworkKind::ImprovedVbinet => Some(truncated_svd(&h)?),
            _ => None,
        };
        Ok(Self { h, svd, sample })
    }
}

fn svd_or_compute<'a>(h: &ComplexMatrix, svd: Option<&'a SvdFactors>, slot: &'a mut Option<SvdFactors>) -> Result<&'a SvdFactors> {
    match svd {
        Some(s) => Ok(s),
        None => Ok(slot.insert(truncated_svd(h)?)),
    }
}

/// Runs the network described by `params`. `noise_var` is ignored by the
/// VBINet family; `svd` is computed on the fly when absent.
pub fn network_forward(
    params: &DetectorParams,
    y: &[Complex64],
    h: &ComplexMatrix,
    svd: Option<&SvdFactors>,
    c: &Constellation,
    noise_var: f64,
) -> Result<DetectionTrace> {
    match params {
        DetectorParams::Vbinet(p) => vbinet_forward(y, h, c, p),
        DetectorParams::ImprovedVbinet(p) => {
            let mut slot = None;
            improved_vbinet_forward(y, svd_or_compute(h, svd, &mut slot)?, c, p)
        }
        DetectorParams::Oampnet(p) => oampnet_forward(y, h, c, noise_var, p),
        DetectorParams::MmnetIid(p) => mmnet_iid_forward(y, h, c, noise_var, p),
        DetectorParams::MmnetFull(p) => mmnet_full_forward(y, h, c, noise_var, p),
    }
}

/// Loss and flat gradient of a single sample.
pub fn sample_loss_grad(params: &DetectorParams, s: &TrainingSample, c: &Constellation) -> Result<(f64, Vec<f64>)> {
    let (y, x, nv) = (&s.sample.y, &s.sample.x, s.sample.noise_var);
    match params {
        DetectorParams::Vbinet(p) => vbinet_loss_grad(y, &s.h, x, c, p),
        DetectorParams::ImprovedVbinet(p) => {
            let mut slot = None;
            improved_vbinet_loss_grad(y, svd_or_compute(&s.h, s.svd.as_ref(), &mut slot)?, x, c, p)
        }
        DetectorParams::Oampnet(p) => oampnet_loss_grad(y, &s.h, x, c, nv, p),
        DetectorParams::MmnetIid(p) => mmnet_iid_loss_grad(y, &s.h, x, c, nv, p),
        DetectorParams::MmnetFull(p) => mmnet_full_loss_grad(y, &s.h, x, c, nv, p),
    }
}

/// Mean loss of a batch, forward only.
pub fn batch_loss(params: &DetectorParams, batch: &[TrainingSample], c: &Constellation) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let losses: Vec<Result<f64>> = batch
        .par_iter()
        .map(|s| {
            let tr = network_forward(params, &s.sample.y, &s.h, s.svd.as_ref(), c, s.sample.noise_var)?;
            loss(&tr, &s.sample.x, params.layers())
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / batch.len() as f64)
}

/// Mean loss and gradient of a batch. Samples are processed in parallel and
/// reduced in batch order, so the result does not depend on thread count.
pub fn batch_loss_grad(params: &DetectorParams, batch: &[TrainingSample], c: &Constellation) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let parts: Vec<Result<(f64, Vec<f64>)>> = batch.par_iter().map(|s| sample_loss_grad(params, s, c)).collect();
    let n = batch.len() as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; params.len()];
    for part in parts {
        let (l, g) = part?;
        total += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((total / n, grad))
}

/// Adam moments and hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn with_defaults(len: usize) -> Self {
        Self::new(len, 0.9, 0.999, 1e-8)
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grad.len() || grad.len() != state.m.len() {
        return Err(Error::Dimension(format!(
            "params {}, grad {}, state {}",
            params.len(),
            grad.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= lr * mh / (vh.sqrt() + state.eps);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Offline,
    Online,
}

/// Everything a training run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub kind: NetworkKind,
    pub dims: Dims,
    pub layers: usize,
    /// Constellation size (4, 16 or 64).
    pub modulation: usize,
    pub batch: usize,
    /// Iterations for offline training, or for the first channel online.
    pub iters: usize,
    /// Iterations for each warm-started channel after the first.
    pub iters_online: usize,
    pub snr_range_db: (f64, f64),
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub channel: ChannelSource,
    /// Lets offline training run MMNet-full anyway.
    pub allow_offline_mmnet_full: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kind: NetworkKind::Vbinet,
            dims: Dims::new(8, 4),
            layers: 10,
            modulation: 4,
            batch: 128,
            iters: 2000,
            iters_online: 10,
            snr_range_db: (2.0, 16.0),
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            mode: TrainMode::Offline,
            channel: ChannelSource::Iid,
            allow_offline_mmnet_full: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.snr_range_db;
        if self.batch == 0 || self.iters == 0 {
            return Err(Error::InvalidArgument("batch and iters must be at least 1".into()));
        }
        if self.layers == 0 {
            return Err(Error::InvalidArgument("layers must be at least 1".into()));
        }
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidArgument(format!("bad SNR range ({lo}, {hi})")));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        if self.dims.n_r < self.dims.n_t || self.dims.n_t == 0 {
            return Err(Error::InvalidArgument("need N_r >= N_t >= 1".into()));
        }
        Constellation::qam(self.modulation)?;
        Ok(())
    }

    fn adam(&self, len: usize) -> AdamState {
        AdamState::new(len, self.beta1, self.beta2, self.adam_eps)
    }
}

/// Random channel generator for offline training and evaluation.
#[derive(Clone, Debug)]
pub enum ChannelModel {
    Iid { n_r: usize, n_t: usize },
    Kronecker(KroneckerModel),
}

impl ChannelModel {
    pub fn new(source: ChannelSource, dims: Dims) -> Result<Self> {
        match source {
            ChannelSource::Iid => Ok(ChannelModel::Iid {
                n_r: dims.n_r,
                n_t: dims.n_t,
            }),
            ChannelSource::Kronecker { rho } => Ok(ChannelModel::Kronecker(KroneckerModel::new(dims.n_r, dims.n_t, rho)?)),
            ChannelSource::File => Err(Error::InvalidArgument(
                "channel files hold fixed realizations; train them online or evaluate them directly".into(),
            )),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ComplexMatrix> {
        match self {
            ChannelModel::Iid { n_r, n_t } => Ok(gen_iid(*n_r, *n_t, rng)?.h),
            ChannelModel::Kronecker(m) => Ok(m.sample(rng).h),
        }
    }
}

fn draw_snr<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn make_sample<R: Rng + ?Sized>(
    kind: NetworkKind,
    h: ComplexMatrix,
    c: &Constellation,
    snr_range: (f64, f64),
    rng: &mut R,
) -> Result<TrainingSample> {
    let snr = draw_snr(rng, snr_range);
    let nv = noise_var_for_snr(&h, snr)?;
    let s = draw_sample(&h, c, nv, rng)?;
    TrainingSample::new(kind, h, s)
}

/// Offline batch `iter`: a fresh channel per sample.
pub fn offline_batch(cfg: &TrainConfig, model: &ChannelModel, c: &Constellation, iter: usize) -> Result<Vec<TrainingSample>> {
    (0..cfg.batch)
        .map(|i| {
            let mut rng = stream(cfg.seed, TRAIN_DOMAIN, (iter * cfg.batch + i) as u64);
            let h = model.sample(&mut rng)?;
            make_sample(cfg.kind, h, c, cfg.snr_range_db, &mut rng)
        })
        .collect()
}

/// Online batch on a fixed channel. `offset` separates the streams of
/// different channels in one run.
pub fn fixed_channel_batch(
    cfg: &TrainConfig,
    h: &ComplexMatrix,
    c: &Constellation,
    offset: u64,
    iter: usize,
) -> Result<Vec<TrainingSample>> {
    (0..cfg.batch)
        .map(|i| {
            let mut rng = stream(cfg.seed, TRAIN_DOMAIN, offset + (iter * cfg.batch + i) as u64);
            make_sample(cfg.kind, h.clone(), c, cfg.snr_range_db, &mut rng)
        })
        .collect()
}

/// Stream offset of channel `k` in online training. Leaves room for 2^40
/// samples per channel.
fn online_offset(k: usize) -> u64 {
    ((k as u64) + 1) << 40
}

/// Stream index of the held-out batch used to report per-channel losses.
const MONITOR_OFFSET: u64 = u64::MAX - (1 << 40);

/// Outcome of a training loop.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: DetectorParams,
    /// Mean batch loss at each iteration, before that iteration's update.
    pub losses: Vec<f64>,
}

fn run_loop(
    cfg: &TrainConfig,
    c: &Constellation,
    mut params: DetectorParams,
    iters: usize,
    mut batch_for: impl FnMut(usize) -> Result<Vec<TrainingSample>>,
) -> Result<TrainOutcome> {
    let mut flat = params.to_flat();
    let mut adam = cfg.adam(flat.len());
    let mut losses = Vec::with_capacity(iters);
    for it in 0..iters {
        let batch = batch_for(it)?;
        let (l, g) = batch_loss_grad(&params, &batch, c)?;
        if !l.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("loss or gradient at iteration {it}")));
        }
        losses.push(l);
        adam_step(&mut flat, &g, &mut adam, cfg.lr)?;
        params.set_flat(&flat)?;
    }
    Ok(TrainOutcome { params, losses })
}

/// Trains over randomly generated channels. Starts from the deterministic
/// initialization unless `init` is given.
pub fn train_offline(cfg: &TrainConfig, init: Option<DetectorParams>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.kind == NetworkKind::MmnetFull && !cfg.allow_offline_mmnet_full {
        return Err(Error::Refused(
            "mmnet_full is online-only; set allow_offline_mmnet_full to train it offline".into(),
        ));
    }
    let c = Constellation::qam(cfg.modulation)?;
    let model = ChannelModel::new(cfg.channel, cfg.dims)?;
    let params = match init {
        Some(p) => check_init(cfg, p)?,
        None => {
            let anchor = model.sample(&mut stream(cfg.seed, INIT_DOMAIN, 0))?;
            init_params(cfg.kind, cfg.dims, cfg.layers, Some(&anchor))?
        }
    };
    run_loop(cfg, &c, params, cfg.iters, |it| offline_batch(cfg, &model, &c, it))
}

fn check_init(cfg: &TrainConfig, p: DetectorParams) -> Result<DetectorParams> {
    if p.kind() != cfg.kind || p.layers() != cfg.layers {
        return Err(Error::InvalidArgument(format!(
            "initial params are {} with {} layers, config wants {} with {}",
            p.kind().name(),
            p.layers(),
            cfg.kind.name(),
            cfg.layers
        )));
    }
    Ok(p)
}

/// Result of online training on one channel.
#[derive(Clone, Debug)]
pub struct OnlineChannelResult {
    pub params: DetectorParams,
    pub losses: Vec<f64>,
    /// Held-out batch loss of the starting parameters on this channel.
    pub initial_loss: f64,
    /// Held-out batch loss of the trained parameters on this channel.
    pub final_loss: f64,
}

/// Held-out loss of `params` on channel `h`. Depends only on the seed and
/// the channel, so equal channels give equal values.
pub fn monitor_loss(cfg: &TrainConfig, params: &DetectorParams, h: &ComplexMatrix, c: &Constellation) -> Result<f64> {
    let batch = fixed_channel_batch(cfg, h, c, MONITOR_OFFSET, 0)?;
    batch_loss(params, &batch, c)
}

/// Trains on each channel in order. Channel 0 starts from the
/// initialization (anchored on channel 0) and runs `iters` steps; every
/// later channel warm-starts from its predecessor and runs `iters_online`
/// steps with a fresh optimizer state.
pub fn train_online(channels: &[ComplexMatrix], cfg: &TrainConfig, init: Option<DetectorParams>) -> Result<Vec<OnlineChannelResult>> {
    cfg.validate()?;
    let first = channels
        .first()
        .ok_or_else(|| Error::InvalidArgument("online training needs at least one channel".into()))?;
    if channels.iter().any(|h| h.rows() != cfg.dims.n_r || h.cols() != cfg.dims.n_t) {
        return Err(Error::Dimension("channel shape differs from config dims".into()));
    }
    let c = Constellation::qam(cfg.modulation)?;
    let mut params = match init {
        Some(p) => check_init(cfg, p)?,
        None => init_params(cfg.kind, cfg.dims, cfg.layers, Some(first))?,
    };
    let mut out = Vec::with_capacity(channels.len());
    for (k, h) in channels.iter().enumerate() {
        let iters = if k == 0 { cfg.iters } else { cfg.iters_online };
        let initial_loss = monitor_loss(cfg, &params, h, &c)?;
        let offset = online_offset(k);
        let outcome = run_loop(cfg, &c, params, iters, |it| fixed_channel_batch(cfg, h, &c, offset, it))?;
        let final_loss = monitor_loss(cfg, &outcome.params, h, &c)?;
        params = outcome.params.clone();
        out.push(OnlineChannelResult {
            params: outcome.params,
            losses: outcome.losses,
            initial_loss,
            final_loss,
        });
    }
    Ok(out)
}

/// Record of a finished training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainManifest {
    pub config: TrainConfig,
    pub seed: u64,
    pub params_path: PathBuf,
    pub loss_curve_path: PathBuf,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Writes `params.json`, `loss.csv` (`iteration,loss`) and `manifest.json`
/// into `dir` and returns the manifest.
pub fn write_training_outputs(cfg: &TrainConfig, outcome: &TrainOutcome, dir: &Path) -> Result<TrainManifest> {
    fs::create_dir_all(dir)?;
    let params_path = dir.join("params.json");
    let loss_curve_path = dir.join("loss.csv");
    outcome.params.save(cfg.dims, &params_path)?;
    let mut w = csv::Writer::from_path(&loss_curve_path)?;
    w.write_record(["iteration", "loss"])?;
    for (i, l) in outcome.losses.iter().enumerate() {
        w.write_record([i.to_string(), format!("{l:?}")])?;
    }
    w.flush()?;
    let manifest = TrainManifest {
        config: cfg.clone(),
        seed: cfg.seed,
        params_path,
        loss_curve_path,
        initial_loss: outcome.losses.first().copied().unwrap_or(f64::NAN),
        final_loss: outcome.losses.last().copied().unwrap_or(f64::NAN),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}
