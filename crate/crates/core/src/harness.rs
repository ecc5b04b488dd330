//! Monte-Carlo SER evaluation and the experiment drivers behind the CLI.
//!
//! Every detector in a run sees the same samples: sample `n` is drawn from
//! evaluation stream `n`, so channels, symbols and unit noise are shared
//! across detectors, SNR points and NUF points. Samples are processed in
//! blocks; a detector stops counting after the first block at which its
//! stopping rule holds.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{draw_sample, load_channels, noise_var_for_snr, ChannelSource};
use crate::classic::{detect_lmmse, detect_ml, detect_zf};
use crate::constellation::Constellation;
use crate::detection::{DetectionResult, NetworkKind};
use crate::error::{Error, Result};
use crate::ifvb::{ifvb_detect, improved_ifvb_with_svd, IfvbConfig, TChoice};
use crate::baselines::oamp_detect;
use crate::numerics::{truncated_svd, ComplexMatrix, SvdFactors};
use crate::params::{DetectorParams, Dims};
use crate::rng::{stream, EVAL_DOMAIN};
use crate::training::{network_forward, train_offline, train_online, ChannelModel, TrainConfig, TrainMode};

/// CSV header of every result file.
pub const CSV_HEADER: [&str; 9] = [
    "detector", "snr_db", "nuf_db", "layers", "ser", "symbols", "errors", "seed", "config_hash",
];

/// Transmit-antenna count from which a run counts as large scale and
/// trained OAMPNet is skipped unless forced.
pub const LARGE_SCALE_NT: usize = 64;

/// Hex characters of the SHA-256 digest kept in `config_hash`.
pub const HASH_LEN: usize = 16;

/// When to stop counting for one detector at one operating point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StoppingRule {
    pub min_errors: u64,
    pub min_symbols: u64,
    pub max_symbols: u64,
    /// Symbols per evaluation block (rounded up to whole channel uses).
    pub block_symbols: u64,
}

impl Default for StoppingRule {
    fn default() -> Self {
        Self {
            min_errors: 500,
            min_symbols: 100_000,
            max_symbols: 10_000_000,
            block_symbols: 10_000,
        }
    }
}

impl StoppingRule {
    pub fn done(&self, c: &Counts) -> bool {
        (c.errors >= self.min_errors && c.symbols >= self.min_symbols) || c.symbols >= self.max_symbols
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_symbols == 0 || self.max_symbols == 0 {
            return Err(Error::InvalidArgument("block_symbols and max_symbols must be positive".into()));
        }
        Ok(())
    }

    /// The rule for one of `parts` equal shares of the work.
    pub fn split(&self, parts: usize) -> Self {
        let p = parts.max(1) as u64;
        Self {
            min_errors: self.min_errors.div_ceil(p),
            min_symbols: self.min_symbols.div_ceil(p),
            max_symbols: self.max_symbols.div_ceil(p),
            block_symbols: self.block_symbols.div_ceil(p),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub symbols: u64,
    pub errors: u64,
}

impl Counts {
    pub fn ser(&self) -> f64 {
        if self.symbols == 0 {
            0.0
        } else {
            self.errors as f64 / self.symbols as f64
        }
    }

    pub fn add(&mut self, other: Counts) {
        self.symbols += other.symbols;
        self.errors += other.errors;
    }
}

fn default_iterations() -> usize {
    100
}

fn default_t_choice() -> TChoice {
    TChoice::DiagGram
}

/// A detector as written in an experiment config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DetectorSpec {
    Zf,
    Lmmse,
    Ml,
    Ifvb {
        #[serde(default = "default_t_choice")]
        t_choice: TChoice,
        #[serde(default = "default_iterations")]
        iterations: usize,
        #[serde(default)]
        label: Option<String>,
    },
    ImprovedIfvb {
        #[serde(default = "default_iterations")]
        iterations: usize,
        #[serde(default)]
        label: Option<String>,
    },
    Oamp {
        #[serde(default = "default_iterations")]
        iterations: usize,
        #[serde(default)]
        label: Option<String>,
    },
    /// A trained network loaded from a parameter file.
    Params {
        path: PathBuf,
        #[serde(default)]
        label: Option<String>,
    },
    /// A network trained as part of the run from the experiment's training
    /// template.
    Train {
        kind: NetworkKind,
        #[serde(default)]
        label: Option<String>,
    },
}

/// A ready-to-run detector.
#[derive(Clone, Debug)]
pub enum DetectorImpl {
    Zf,
    Lmmse,
    Ml,
    Ifvb(IfvbConfig),
    ImprovedIfvb(IfvbConfig),
    Oamp(usize),
    Network(DetectorParams),
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub label: String,
    pub imp: DetectorImpl,
}

impl Detector {
    pub fn new(imp: DetectorImpl) -> Self {
        let label = match &imp {
            DetectorImpl::Zf => "zf".to_string(),
            DetectorImpl::Lmmse => "lmmse".to_string(),
            DetectorImpl::Ml => "ml".to_string(),
            DetectorImpl::Ifvb(cfg) => match cfg.t_choice {
                TChoice::ScaledIdentity => "ifvb_t1".to_string(),
                TChoice::DiagGram => "ifvb_t2".to_string(),
                TChoice::CustomDiag(_) => "ifvb_custom".to_string(),
            },
            DetectorImpl::ImprovedIfvb(_) => "improved_ifvb".to_string(),
            DetectorImpl::Oamp(_) => "oamp".to_string(),
            DetectorImpl::Network(p) => p.kind().name().to_string(),
        };
        Self { label, imp }
    }

    pub fn with_label(mut self, label: Option<String>) -> Self {
        if let Some(l) = label {
            self.label = l;
        }
        self
    }

    /// Iterations or layers; 0 for the one-shot detectors.
    pub fn layers(&self) -> usize {
        match &self.imp {
            DetectorImpl::Zf | DetectorImpl::Lmmse | DetectorImpl::Ml => 0,
            DetectorImpl::Ifvb(c) | DetectorImpl::ImprovedIfvb(c) => c.max_iter,
            DetectorImpl::Oamp(n) => *n,
            DetectorImpl::Network(p) => p.layers(),
        }
    }

    pub fn needs_svd(&self) -> bool {
        matches!(&self.imp, DetectorImpl::ImprovedIfvb(_))
            || matches!(&self.imp, DetectorImpl::Network(p) if p.kind() == NetworkKind::ImprovedVbinet)
    }

    /// Detects one sample. `noise_var` is the variance presented to the
    /// detector, which may differ from the true one.
    pub fn detect(
        &self,
        y: &[Complex64],
        h: &ComplexMatrix,
        svd: Option<&SvdFactors>,
        c: &Constellation,
        noise_var: f64,
    ) -> Result<DetectionResult> {
        let svd_required = || svd.ok_or_else(|| Error::InvalidArgument("detector needs the channel SVD".into()));
        match &self.imp {
            DetectorImpl::Zf => detect_zf(y, h, c),
            DetectorImpl::Lmmse => detect_lmmse(y, h, noise_var, c),
            DetectorImpl::Ml => detect_ml(y, h, c),
            DetectorImpl::Ifvb(cfg) => Ok(ifvb_detect(y, h, c, cfg)?.result),
            DetectorImpl::ImprovedIfvb(cfg) => Ok(improved_ifvb_with_svd(y, svd_required()?, c, cfg)?.result),
            DetectorImpl::Oamp(n) => Ok(oamp_detect(y, h, c, noise_var, *n)?.result),
            DetectorImpl::Network(p) => Ok(network_forward(p, y, h, svd, c, noise_var)?.result),
        }
    }
}

/// Where evaluation channels come from.
#[derive(Clone, Debug)]
pub enum EvalChannels {
    /// A fresh random channel per sample.
    Random(ChannelModel),
    /// Fixed realizations, used round-robin.
    Fixed(Vec<ComplexMatrix>),
}

#[derive(Clone, Debug)]
pub struct EvalSetup {
    pub channels: EvalChannels,
    pub constellation: Constellation,
    pub seed: u64,
}

impl EvalSetup {
    fn channel(&self, n: u64, rng: &mut rand_chacha::ChaCha8Rng) -> Result<ComplexMatrix> {
        match &self.channels {
            EvalChannels::Random(m) => m.sample(rng),
            EvalChannels::Fixed(list) => {
                if list.is_empty() {
                    return Err(Error::InvalidArgument("no evaluation channels".into()));
                }
                Ok(list[(n % list.len() as u64) as usize].clone())
            }
        }
    }

    fn n_t(&self) -> usize {
        match &self.channels {
            EvalChannels::Random(ChannelModel::Iid { n_t, .. }) => *n_t,
            EvalChannels::Random(ChannelModel::Kronecker(m)) => m.n_t(),
            EvalChannels::Fixed(list) => list.first().map_or(1, |h| h.cols()),
        }
    }
}

/// NUF in dB to the factor applied to the presented noise variance.
pub fn nuf_factor(nuf_db: f64) -> f64 {
    10f64.powf(nuf_db / 10.0)
}

/// Symbol-error counts of every detector at one `(snr, nuf)` point.
pub fn evaluate(detectors: &[Detector], setup: &EvalSetup, snr_db: f64, nuf_db: f64, rule: &StoppingRule) -> Result<Vec<Counts>> {
    rule.validate()?;
    let c = &setup.constellation;
    let nt = setup.n_t() as u64;
    let block = rule.block_symbols.div_ceil(nt).max(1);
    let eta = nuf_factor(nuf_db);
    let mut counts = vec![Counts::default(); detectors.len()];
    let mut active: Vec<bool> = vec![true; detectors.len()];
    let mut start = 0u64;
    while active.iter().any(|a| *a) {
        let want_svd = detectors.iter().zip(&active).any(|(d, a)| *a && d.needs_svd());
        let per_sample: Vec<Result<Vec<Option<u64>>>> = (start..start + block)
            .into_par_iter()
            .map(|n| {
                let mut rng = stream(setup.seed, EVAL_DOMAIN, n);
                let h = setup.channel(n, &mut rng)?;
                let nv = noise_var_for_snr(&h, snr_db)?;
                let s = draw_sample(&h, c, nv, &mut rng)?;
                let svd = if want_svd { Some(truncated_svd(&h)?) } else { None };
                detectors
                    .iter()
                    .zip(&active)
                    .map(|(d, a)| {
                        if !*a {
                            return Ok(None);
                        }
                        let r = d.detect(&s.y, &h, svd.as_ref(), c, nv * eta)?;
                        Ok(Some(r.symbol_errors(&s.x_indices) as u64))
                    })
                    .collect()
            })
            .collect();
        for sample in per_sample {
            for (k, e) in sample?.into_iter().enumerate() {
                if let Some(e) = e {
                    counts[k].add(Counts { symbols: nt, errors: e });
                }
            }
        }
        for (k, a) in active.iter_mut().enumerate() {
            if *a && rule.done(&counts[k]) {
                *a = false;
            }
        }
        start += block;
    }
    Ok(counts)
}

/// One line of a result CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub detector: String,
    pub snr_db: f64,
    pub nuf_db: f64,
    pub layers: usize,
    pub ser: f64,
    pub symbols: u64,
    pub errors: u64,
    pub seed: u64,
    pub config_hash: String,
}

impl ResultRow {
    fn new(d: &Detector, snr_db: f64, nuf_db: f64, c: Counts, seed: u64, hash: &str) -> Self {
        Self {
            detector: d.label.clone(),
            snr_db,
            nuf_db,
            layers: d.layers(),
            ser: c.ser(),
            symbols: c.symbols,
            errors: c.errors,
            seed,
            config_hash: hash.to_string(),
        }
    }
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(Error::InvalidArgument(format!("unexpected CSV header {header:?}")));
    }
    Ok(r.deserialize().collect::<std::result::Result<Vec<ResultRow>, _>>()?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// SER against SNR.
    SerSweep,
    /// SER against the number of layers at each SNR.
    LayerSweep,
    /// SER against the noise uncertainty factor at each SNR.
    NoiseUncertainty,
    /// Per-realization training and testing on channels from a file.
    Online,
}

/// Full description of an experiment run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub experiment: ExperimentKind,
    pub detectors: Vec<DetectorSpec>,
    pub channel: ChannelSource,
    /// Channel file for `channel = file` and for online runs.
    pub channel_file: Option<PathBuf>,
    pub dims: Dims,
    pub modulation: usize,
    pub snr_db: Vec<f64>,
    pub nuf_db: Vec<f64>,
    /// Layer grid of a layer sweep.
    pub layers: Vec<usize>,
    pub stopping: StoppingRule,
    pub seed: u64,
    /// Template for `train` detectors; kind, dims, modulation, channel and
    /// seed are taken from the experiment.
    pub train: TrainConfig,
    /// Result CSV path; the manifest is written next to it.
    pub output: PathBuf,
    /// Allow MMNet-full parameters on random channels.
    pub allow_online_only: bool,
    /// Run trained OAMPNet even at large scale.
    pub force_oampnet: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            experiment: ExperimentKind::SerSweep,
            detectors: Vec::new(),
            channel: ChannelSource::Iid,
            channel_file: None,
            dims: Dims::new(8, 4),
            modulation: 4,
            snr_db: Vec::new(),
            nuf_db: vec![0.0],
            layers: vec![1, 2, 4, 6, 8, 10, 20],
            stopping: StoppingRule::default(),
            seed: 0,
            train: TrainConfig::default(),
            output: PathBuf::from("results.csv"),
            allow_online_only: false,
            force_oampnet: false,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.snr_db.is_empty() {
            return Err(Error::InvalidArgument("snr grid is empty".into()));
        }
        if self.detectors.is_empty() {
            return Err(Error::InvalidArgument("no detectors listed".into()));
        }
        if self.experiment == ExperimentKind::NoiseUncertainty && self.nuf_db.is_empty() {
            return Err(Error::InvalidArgument("nuf grid is empty".into()));
        }
        if self.experiment == ExperimentKind::LayerSweep && (self.layers.is_empty() || self.layers.contains(&0)) {
            return Err(Error::InvalidArgument("layer grid must be nonempty and positive".into()));
        }
        if self.dims.n_t == 0 || self.dims.n_r < self.dims.n_t {
            return Err(Error::InvalidArgument("need N_r >= N_t >= 1".into()));
        }
        Constellation::qam(self.modulation)?;
        self.stopping.validate()
    }

    /// Hash of everything that affects results; the output path is left
    /// out so moving a run does not change it.
    pub fn config_hash(&self) -> Result<String> {
        let mut copy = self.clone();
        copy.output = PathBuf::new();
        let digest = Sha256::digest(serde_json::to_vec(&copy)?);
        let mut s = hex::encode(digest);
        s.truncate(HASH_LEN);
        Ok(s)
    }

    fn setup(&self) -> Result<EvalSetup> {
        let channels = match self.channel {
            ChannelSource::File => EvalChannels::Fixed(self.file_channels()?),
            other => EvalChannels::Random(ChannelModel::new(other, self.dims)?),
        };
        Ok(EvalSetup {
            channels,
            constellation: Constellation::qam(self.modulation)?,
            seed: self.seed,
        })
    }

    fn file_channels(&self) -> Result<Vec<ComplexMatrix>> {
        let path = self
            .channel_file
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("channel_file is required for file channels".into()))?;
        let list: Vec<ComplexMatrix> = load_channels(path)?.into_iter().map(|r| r.h).collect();
        if list.iter().any(|h| h.rows() != self.dims.n_r || h.cols() != self.dims.n_t) {
            return Err(Error::Dimension("channel file shape differs from dims".into()));
        }
        Ok(list)
    }

    fn train_config(&self, kind: NetworkKind, layers: usize) -> TrainConfig {
        TrainConfig {
            kind,
            layers,
            dims: self.dims,
            modulation: self.modulation,
            seed: self.seed,
            channel: self.channel,
            ..self.train.clone()
        }
    }

    fn offline_allowed(&self, kind: NetworkKind) -> Result<()> {
        if kind == NetworkKind::MmnetFull && self.channel != ChannelSource::File && !self.allow_online_only {
            return Err(Error::Refused(
                "mmnet_full is online-only; evaluate it on fixed channels or set allow_online_only".into(),
            ));
        }
        Ok(())
    }

    fn skip_large_scale(&self, kind: NetworkKind) -> bool {
        let skip = kind == NetworkKind::Oampnet && self.dims.n_t >= LARGE_SCALE_NT && !self.force_oampnet;
        if skip {
            log::warn!("skipping oampnet at N_t = {} (set force_oampnet to run it)", self.dims.n_t);
        }
        skip
    }

    /// Resolves the detector list. `layers` overrides the layer or
    /// iteration count of every iterative and trained detector.
    pub fn resolve(&self, layers: Option<usize>) -> Result<Vec<Detector>> {
        let iters = |n: usize| layers.unwrap_or(n);
        let mut out = Vec::new();
        for spec in &self.detectors {
            let d = match spec {
                DetectorSpec::Zf => Detector::new(DetectorImpl::Zf),
                DetectorSpec::Lmmse => Detector::new(DetectorImpl::Lmmse),
                DetectorSpec::Ml => Detector::new(DetectorImpl::Ml),
                DetectorSpec::Ifvb { t_choice, iterations, label } => Detector::new(DetectorImpl::Ifvb(IfvbConfig {
                    t_choice: t_choice.clone(),
                    max_iter: iters(*iterations),
                    ..IfvbConfig::default()
                }))
                .with_label(label.clone()),
                DetectorSpec::ImprovedIfvb { iterations, label } => Detector::new(DetectorImpl::ImprovedIfvb(IfvbConfig {
                    max_iter: iters(*iterations),
                    ..IfvbConfig::default()
                }))
                .with_label(label.clone()),
                DetectorSpec::Oamp { iterations, label } => {
                    Detector::new(DetectorImpl::Oamp(iters(*iterations))).with_label(label.clone())
                }
                DetectorSpec::Params { path, label } => {
                    if layers.is_some() {
                        return Err(Error::InvalidArgument(
                            "a layer sweep cannot vary the depth of a parameter file; use a train detector".into(),
                        ));
                    }
                    let (p, dims) = DetectorParams::load(path)?;
                    if dims != self.dims {
                        return Err(Error::Dimension(format!("{} was trained for {dims:?}", path.display())));
                    }
                    self.offline_allowed(p.kind())?;
                    if self.skip_large_scale(p.kind()) {
                        continue;
                    }
                    Detector::new(DetectorImpl::Network(p)).with_label(label.clone())
                }
                DetectorSpec::Train { kind, label } => {
                    if self.skip_large_scale(*kind) {
                        continue;
                    }
                    let cfg = self.train_config(*kind, iters(self.train.layers));
                    let outcome = train_offline(&cfg, None)?;
                    Detector::new(DetectorImpl::Network(outcome.params)).with_label(label.clone())
                }
            };
            out.push(d);
        }
        Ok(out)
    }
}

fn rows_for(detectors: &[Detector], counts: &[Counts], snr: f64, nuf: f64, spec: &ExperimentSpec, hash: &str) -> Vec<ResultRow> {
    detectors
        .iter()
        .zip(counts)
        .map(|(d, c)| ResultRow::new(d, snr, nuf, *c, spec.seed, hash))
        .collect()
}

/// SER of every detector at every SNR point.
pub fn run_ser_sweep(spec: &ExperimentSpec) -> Result<Vec<ResultRow>> {
    spec.validate()?;
    let hash = spec.config_hash()?;
    let detectors = spec.resolve(None)?;
    let setup = spec.setup()?;
    let mut rows = Vec::new();
    for &snr in &spec.snr_db {
        let counts = evaluate(&detectors, &setup, snr, 0.0, &spec.stopping)?;
        rows.extend(rows_for(&detectors, &counts, snr, 0.0, spec, &hash));
    }
    Ok(rows)
}

/// SER against depth. Iterative detectors run `L` iterations; `train`
/// detectors are trained afresh with `L` layers.
pub fn run_layer_sweep(spec: &ExperimentSpec) -> Result<Vec<ResultRow>> {
    spec.validate()?;
    let hash = spec.config_hash()?;
    let setup = spec.setup()?;
    let mut rows = Vec::new();
    for &l in &spec.layers {
        let detectors = spec.resolve(Some(l))?;
        for &snr in &spec.snr_db {
            let counts = evaluate(&detectors, &setup, snr, 0.0, &spec.stopping)?;
            rows.extend(rows_for(&detectors, &counts, snr, 0.0, spec, &hash));
        }
    }
    Ok(rows)
}

/// SER when detectors are handed `η` times the true noise variance. Every
/// detector gets a row per NUF point, including those that ignore it.
pub fn run_noise_uncertainty(spec: &ExperimentSpec) -> Result<Vec<ResultRow>> {
    spec.validate()?;
    let hash = spec.config_hash()?;
    let detectors = spec.resolve(None)?;
    let setup = spec.setup()?;
    let mut rows = Vec::new();
    for &snr in &spec.snr_db {
        for &nuf in &spec.nuf_db {
            let counts = evaluate(&detectors, &setup, snr, nuf, &spec.stopping)?;
            rows.extend(rows_for(&detectors, &counts, snr, nuf, spec, &hash));
        }
    }
    Ok(rows)
}

/// Trains `train` detectors online over the channel file (warm-starting
/// from one realization to the next) and tests each realization's
/// parameters on that realization. Other detectors run on the same
/// channels. Counts are pooled over realizations.
pub fn run_online_eval(spec: &ExperimentSpec) -> Result<Vec<ResultRow>> {
    spec.validate()?;
    let hash = spec.config_hash()?;
    let channels = spec.file_channels()?;
    if channels.is_empty() {
        return Err(Error::InvalidArgument("channel file holds no channels".into()));
    }
    let c = Constellation::qam(spec.modulation)?;
    let per_channel = spec.stopping.split(channels.len());
    let mut rows = Vec::new();
    for d in &spec.detectors {
        let (label, per_realization) = match d {
            DetectorSpec::Train { kind, label } => {
                let cfg = TrainConfig {
                    mode: TrainMode::Online,
                    ..spec.train_config(*kind, spec.train.layers)
                };
                let trained = train_online(&channels, &cfg, None)?;
                let list: Vec<Detector> = trained
                    .into_iter()
                    .map(|r| Detector::new(DetectorImpl::Network(r.params)))
                    .collect();
                (label.clone().unwrap_or_else(|| format!("{}_online", kind.name())), Some(list))
            }
            _ => (String::new(), None),
        };
        for &snr in &spec.snr_db {
            let row = match &per_realization {
                Some(list) => {
                    let mut total = Counts::default();
                    for (k, (det, h)) in list.iter().zip(&channels).enumerate() {
                        let setup = EvalSetup {
                            channels: EvalChannels::Fixed(vec![h.clone()]),
                            constellation: c.clone(),
                            seed: spec.seed.wrapping_add(k as u64),
                        };
                        total.add(evaluate(std::slice::from_ref(det), &setup, snr, 0.0, &per_channel)?[0]);
                    }
                    let mut row = ResultRow::new(&list[0], snr, 0.0, total, spec.seed, &hash);
                    row.detector = label.clone();
                    row
                }
                None => {
                    let det = ExperimentSpec {
                        detectors: vec![d.clone()],
                        channel: ChannelSource::File,
                        ..spec.clone()
                    }
                    .resolve(None)?
                    .remove(0);
                    let setup = EvalSetup {
                        channels: EvalChannels::Fixed(channels.clone()),
                        constellation: c.clone(),
                        seed: spec.seed,
                    };
                    let counts = evaluate(std::slice::from_ref(&det), &setup, snr, 0.0, &spec.stopping)?;
                    ResultRow::new(&det, snr, 0.0, counts[0], spec.seed, &hash)
                }
            };
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Run record written next to the CSV. The timestamp lives only here so
/// CSVs stay byte-identical across reruns.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub spec: ExperimentSpec,
    pub config_hash: String,
    pub csv_path: PathBuf,
    pub rows: usize,
    pub created_unix_secs: u64,
    pub elapsed_secs: f64,
    pub version: String,
}

/// Path of the manifest that accompanies `csv_path`.
pub fn manifest_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("manifest.json")
}

/// Runs the experiment named in the spec, writes the CSV and manifest and
/// returns the rows.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<ResultRow>> {
    let started = Instant::now();
    let rows = match spec.experiment {
        ExperimentKind::SerSweep => run_ser_sweep(spec)?,
        ExperimentKind::LayerSweep => run_layer_sweep(spec)?,
        ExperimentKind::NoiseUncertainty => run_noise_uncertainty(spec)?,
        ExperimentKind::Online => run_online_eval(spec)?,
    };
    write_results_csv(&spec.output, &rows)?;
    let manifest = RunManifest {
        spec: spec.clone(),
        config_hash: spec.config_hash()?,
        csv_path: spec.output.clone(),
        rows: rows.len(),
        created_unix_secs: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        elapsed_secs: started.elapsed().as_secs_f64(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    fs::write(manifest_path(&spec.output), serde_json::to_string_pretty(&manifest)?)?;
    Ok(rows)
}
