//! Hypernetwork-only training.
//!
//! Each step samples a source dialect uniformly, takes the next batch of its
//! per-epoch permutation, generates that dialect's adapters, and moves the
//! hypernetwork weights along the gradient of the Sinkhorn divergence
//! between the adapted dialect tokens and the frozen SAE tokens of the same
//! sentence pairs. The encoder never changes.
//!
//! A run directory holds
//!
//! ```text
//! run/<name>/config.meta   JSON: every configuration, the sources, corpus hashes
//! run/<name>/best.ckpt     hypernetwork weights of the lowest epoch-mean loss
//! run/<name>/last.ckpt     weights and Adam moments after the latest epoch
//! run/<name>/history.tsv   step, epoch, dialect_id, loss
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{find, read_tensors, write_tensors, Tensor};
use crate::encoder::{Encoder, EncoderConfig, LoraParamSet};
use crate::grad::{loss_and_grad, Objective};
use crate::hypernet::{generate_lora, HypernetConfig, HypernetWeights};
use crate::ot::{OTConfig, PointCloud};
use crate::transform::{build_parallel_corpus, toy::toy_corpus, ParallelCorpus, TokenSentence};
use crate::typology::FeatureVector;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Schedule {
    /// Linear decay from the base rate to zero over all steps, no warmup.
    #[default]
    LinearDecay,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Steps between progress events; 0 disables them.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-5,
            schedule: Schedule::LinearDecay,
            batch_size: 16,
            epochs: 50,
            adam: AdamConfig::default(),
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Config("Adam needs betas in [0, 1) and a positive eps".into()));
        }
        Ok(())
    }
}

/// The frozen encoder with the hypernetwork and transport settings used
/// against it.
#[derive(Debug, Clone)]
pub struct Model {
    pub encoder: Encoder,
    pub hypernet: HypernetConfig,
    pub ot: OTConfig,
}

impl Model {
    /// Toy-vocabulary encoder with a hypernetwork sized for `feature_dim`.
    pub fn toy(encoder: EncoderConfig, feature_dim: usize, ot: OTConfig) -> Result<Self> {
        let encoder = Encoder::toy(encoder)?;
        let hypernet = HypernetConfig::for_encoder(encoder.config(), feature_dim);
        Self::new(encoder, hypernet, ot)
    }

    pub fn new(encoder: Encoder, hypernet: HypernetConfig, ot: OTConfig) -> Result<Self> {
        hypernet.validate()?;
        hypernet.check_encoder(encoder.config())?;
        ot.validate()?;
        Ok(Self { encoder, hypernet, ot })
    }

    pub fn objective(&self) -> Objective<'_> {
        Objective { encoder: &self.encoder, hypernet: &self.hypernet, ot: &self.ot }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, cfg: &AdamConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grads[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub dialect_id: String,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub hw: HypernetWeights,
    pub adam: Adam,
    pub step: u64,
    /// Mean step loss of every finished epoch.
    pub epoch_losses: Vec<f64>,
    pub best_loss: f64,
    /// Epoch index of the best snapshot; `None` when it is the initial
    /// weights.
    pub best_epoch: Option<usize>,
    pub best_weights: HypernetWeights,
    pub history: Vec<StepRecord>,
    /// Feature ids the hypernetwork input is laid out over.
    pub feature_ids: Vec<String>,
}

impl TrainState {
    pub fn new(hw: HypernetWeights, feature_ids: Vec<String>) -> Self {
        let n = hw.param_count();
        Self {
            best_weights: hw.clone(),
            hw,
            adam: Adam::new(n),
            step: 0,
            epoch_losses: Vec::new(),
            best_loss: f64::INFINITY,
            best_epoch: None,
            history: Vec::new(),
            feature_ids,
        }
    }
}

/// One training dialect: its features, parallel corpus and the frozen SAE
/// encodings of the corpus, sentence by sentence.
#[derive(Debug, Clone)]
pub struct SourceData {
    pub features: FeatureVector,
    pub corpus: ParallelCorpus,
    pub sae: PointCloud,
    offsets: Vec<usize>,
}

impl SourceData {
    pub fn new(features: FeatureVector, corpus: ParallelCorpus, sae: PointCloud) -> Result<Self> {
        let mut offsets = vec![0];
        for p in &corpus.pairs {
            offsets.push(offsets.last().unwrap() + p.sae.len());
        }
        if *offsets.last().unwrap() != sae.len() {
            return Err(Error::Validation(format!(
                "SAE cloud of {} has {} rows, its corpus has {} SAE tokens",
                corpus.dialect_id,
                sae.len(),
                offsets.last().unwrap()
            )));
        }
        if corpus.is_empty() {
            return Err(Error::Argument(format!("corpus of {} is empty", corpus.dialect_id)));
        }
        Ok(Self { features, corpus, sae, offsets })
    }

    pub fn dialect_id(&self) -> &str {
        &self.corpus.dialect_id
    }

    /// Dialect sides of the given pairs and the SAE cloud of exactly their
    /// counterparts, in the same order.
    pub fn batch(&self, idx: &[usize]) -> Result<(Vec<TokenSentence>, PointCloud)> {
        let sentences = idx.iter().map(|&i| self.corpus.pairs[i].dialect.clone()).collect();
        let rows: Vec<usize> = idx.iter().flat_map(|&i| self.offsets[i]..self.offsets[i + 1]).collect();
        let pts = self.sae.points().select(Axis(0), &rows);
        Ok((sentences, PointCloud::uniform(pts)?))
    }
}

/// Encodes the SAE side of every corpus with no adapter. With `cache_dir`,
/// clouds are stored as `sae_<dialect>.ckpt` next to a `sae_<dialect>.json`
/// key of encoder seed and SAE-side hash; a key that does not match the
/// inputs is a stale-cache error.
pub fn precompute_sae(
    corpora: &BTreeMap<String, ParallelCorpus>,
    encoder: &Encoder,
    cache_dir: Option<&Path>,
) -> Result<BTreeMap<String, PointCloud>> {
    if corpora.is_empty() {
        return Err(Error::Argument("no corpora to encode".into()));
    }
    let mut out = BTreeMap::new();
    for (id, corpus) in corpora {
        let key = CacheKey {
            encoder_seed: encoder.config().seed,
            encoder: encoder.config().clone(),
            sae_hash: corpus.sae_hash(),
        };
        let cloud = match cache_dir {
            None => encoder.batch_encode(None, &corpus.sae_sentences())?,
            Some(dir) => cached_cloud(dir, id, &key, || encoder.batch_encode(None, &corpus.sae_sentences()))?,
        };
        out.insert(id.clone(), cloud);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheKey {
    encoder_seed: u64,
    encoder: EncoderConfig,
    sae_hash: String,
}

fn cached_cloud(
    dir: &Path,
    id: &str,
    key: &CacheKey,
    compute: impl FnOnce() -> Result<PointCloud>,
) -> Result<PointCloud> {
    let meta = dir.join(format!("sae_{id}.json"));
    let data = dir.join(format!("sae_{id}.ckpt"));
    if meta.exists() {
        let text = crate::audit::read_text(&meta)?;
        let stored: CacheKey = serde_json::from_str(&text)
            .map_err(|e| Error::StaleCache { path: meta.clone(), msg: e.to_string() })?;
        if &stored != key {
            return Err(Error::StaleCache {
                path: meta,
                msg: format!(
                    "cached for encoder seed {} and SAE hash {}, requested seed {} and hash {}",
                    stored.encoder_seed, stored.sae_hash, key.encoder_seed, key.sae_hash
                ),
            });
        }
        let ts = read_tensors(&data)?;
        let stale = |e: Error| Error::StaleCache { path: data.clone(), msg: e.to_string() };
        let pts = find(&ts, "sae/points").and_then(Tensor::to_matrix).map_err(stale)?;
        let w = find(&ts, "sae/weights").and_then(Tensor::to_vector).map_err(stale)?;
        return PointCloud::new(pts, w);
    }
    let cloud = compute()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let pts: Array2<f64> = cloud.points().to_owned();
    let w: Array1<f64> = cloud.weights().to_owned();
    write_tensors(&data, &[Tensor::from_matrix("sae/points", &pts), Tensor::from_vector("sae/weights", &w)])?;
    let json = serde_json::to_string_pretty(key).expect("cache key serializes");
    std::fs::write(&meta, json).map_err(|e| Error::io(&meta, e))?;
    Ok(cloud)
}

/// Pairs each corpus with its features and SAE cloud, dropping `exclude`.
pub fn prepare_sources(
    corpora: &BTreeMap<String, ParallelCorpus>,
    features: &BTreeMap<String, FeatureVector>,
    sae: &BTreeMap<String, PointCloud>,
    exclude: Option<&str>,
) -> Result<Vec<SourceData>> {
    let mut out = Vec::new();
    for (id, corpus) in corpora {
        if Some(id.as_str()) == exclude {
            continue;
        }
        let f = features
            .get(id)
            .ok_or_else(|| Error::Schema(format!("no feature vector for training dialect {id}")))?;
        let cloud = sae.get(id).ok_or_else(|| Error::Argument(format!("no SAE cloud for {id}")))?;
        out.push(SourceData::new(f.clone(), corpus.clone(), cloud.clone())?);
    }
    if out.is_empty() {
        return Err(Error::Argument("at least one source dialect is required".into()));
    }
    let ids = out[0].features.feature_ids().to_vec();
    if out.iter().any(|s| s.features.feature_ids() != ids.as_slice()) {
        return Err(Error::Schema("source feature vectors use different feature universes".into()));
    }
    Ok(out)
}

/// Mean loss over consecutive batches of every source, in order.
pub fn mean_loss(model: &Model, hw: &HypernetWeights, sources: &[SourceData], batch_size: usize) -> Result<f64> {
    let obj = model.objective();
    let (mut sum, mut n) = (0.0, 0usize);
    for s in sources {
        let idx: Vec<usize> = (0..s.corpus.len()).collect();
        for chunk in idx.chunks(batch_size.max(1)) {
            let (sents, cloud) = s.batch(chunk)?;
            sum += obj.loss(hw, &s.features, &sents, &cloud)?;
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

/// Training progress reported to an observer.
#[derive(Debug)]
pub enum Event<'a> {
    Step(&'a StepRecord),
    /// Every `eval_every` steps: running mean loss of the current epoch.
    Progress { step: u64, epoch: usize, running_mean: f64 },
    /// After each epoch, counted from 1; `improved` when this epoch became
    /// the best.
    Epoch { epoch: usize, mean_loss: f64, improved: bool, state: &'a TrainState },
}

/// Steps per epoch: every source's corpus split into batches.
pub fn steps_per_epoch(sources: &[SourceData], batch_size: usize) -> usize {
    sources.iter().map(|s| s.corpus.len().div_ceil(batch_size)).sum()
}

/// Trains from a fresh initialisation seeded by `cfg.seed`.
pub fn train(
    model: &Model,
    sources: &[SourceData],
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(Event) -> Result<()>,
) -> Result<TrainState> {
    cfg.validate()?;
    let Some(first) = sources.first() else {
        return Err(Error::Argument("at least one source dialect is required".into()));
    };
    if first.features.len() != model.hypernet.feature_dim {
        return Err(Error::Schema(format!(
            "feature vectors have {} entries, hypernetwork expects {}",
            first.features.len(),
            model.hypernet.feature_dim
        )));
    }
    let hw = HypernetWeights::init(&model.hypernet, cfg.seed)?;
    let mut state = TrainState::new(hw, first.features.feature_ids().to_vec());
    if cfg.epochs == 0 {
        state.best_loss = mean_loss(model, &state.hw, sources, cfg.batch_size)?;
        return Ok(state);
    }
    resume(model, sources, cfg, state, observer)
}

/// Continues training `state` until `cfg.epochs` epochs are done.
pub fn resume(
    model: &Model,
    sources: &[SourceData],
    cfg: &TrainConfig,
    mut state: TrainState,
    observer: &mut dyn FnMut(Event) -> Result<()>,
) -> Result<TrainState> {
    cfg.validate()?;
    let obj = model.objective();
    let per_epoch = steps_per_epoch(sources, cfg.batch_size);
    let total = (per_epoch * cfg.epochs) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    // Replay the sampling stream up to the resume point.
    let mut perms: Vec<(Vec<usize>, usize)> = sources.iter().map(|s| ((0..s.corpus.len()).collect(), usize::MAX)).collect();
    let mut draw = |rng: &mut ChaCha8Rng| -> (usize, Vec<usize>) {
        let k = rng.random_range(0..sources.len());
        let (perm, cursor) = &mut perms[k];
        if *cursor >= perm.len() {
            perm.shuffle(rng);
            *cursor = 0;
        }
        let end = (*cursor + cfg.batch_size).min(perm.len());
        let idx = perm[*cursor..end].to_vec();
        *cursor = end;
        (k, idx)
    };
    for _ in 0..state.step {
        draw(&mut rng);
    }

    let mut flat = state.hw.to_flat();
    while state.epoch_losses.len() < cfg.epochs {
        let epoch = state.epoch_losses.len();
        let mut sum = 0.0;
        for i in 0..per_epoch {
            let (k, idx) = draw(&mut rng);
            let src = &sources[k];
            let (sents, cloud) = src.batch(&idx)?;
            let report = loss_and_grad(&obj, &state.hw, &src.features, &sents, &cloud)?;
            let lr = match cfg.schedule {
                Schedule::LinearDecay => cfg.learning_rate * (1.0 - state.step as f64 / total).max(0.0),
            };
            state.adam.step(&mut flat, &report.grads.to_flat(), lr, &cfg.adam);
            state.hw.set_flat(&flat)?;
            if !state.hw.is_finite() {
                return Err(Error::numeric("adam", format!("non-finite weights after step {}", state.step + 1)));
            }
            state.step += 1;
            sum += report.loss;
            let rec = StepRecord { step: state.step, epoch: epoch + 1, dialect_id: src.dialect_id().to_string(), loss: report.loss };
            observer(Event::Step(&rec))?;
            state.history.push(rec);
            if cfg.eval_every > 0 && state.step.is_multiple_of(cfg.eval_every as u64) {
                observer(Event::Progress { step: state.step, epoch: epoch + 1, running_mean: sum / (i + 1) as f64 })?;
            }
        }
        let mean = sum / per_epoch as f64;
        state.epoch_losses.push(mean);
        let improved = mean < state.best_loss;
        if improved {
            state.best_loss = mean;
            state.best_epoch = Some(epoch);
            state.best_weights = state.hw.clone();
        }
        observer(Event::Epoch { epoch: epoch + 1, mean_loss: mean, improved, state: &state })?;
    }
    Ok(state)
}

/// Adapters for a dialect from its feature vector alone, using the best
/// snapshot.
pub fn zero_shot_adapt(state: &TrainState, hypernet: &HypernetConfig, target: &FeatureVector) -> Result<LoraParamSet> {
    if target.feature_ids() != state.feature_ids.as_slice() {
        return Err(Error::Schema(format!(
            "{} uses a feature universe of {} ids that differs from the training one ({} ids)",
            target.dialect_id(),
            target.len(),
            state.feature_ids.len()
        )));
    }
    generate_lora(&state.best_weights, target, hypernet)
}

/// Everything needed to rebuild a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
    pub hypernet: HypernetConfig,
    pub ot: OTConfig,
    pub sources: Vec<String>,
    pub excluded: Option<String>,
    /// Record-file hash of each training corpus.
    pub corpus_hashes: BTreeMap<String, String>,
    pub feature_ids: Vec<String>,
}

pub const HISTORY_HEADER: &str = "step\tepoch\tdialect_id\tloss";

fn history_line(r: &StepRecord) -> String {
    format!("{}\t{}\t{}\t{:?}\n", r.step, r.epoch, r.dialect_id, r.loss)
}

fn scalar(name: &str, v: f64) -> Tensor {
    Tensor { name: name.into(), shape: vec![1], data: vec![v] }
}

fn write_epoch(dir: &Path, state: &TrainState, improved: bool) -> Result<()> {
    let mut last = state.hw.tensors();
    last.push(Tensor { name: "adam/m".into(), shape: vec![state.adam.m.len()], data: state.adam.m.clone() });
    last.push(Tensor { name: "adam/v".into(), shape: vec![state.adam.v.len()], data: state.adam.v.clone() });
    last.push(scalar("meta/step", state.step as f64));
    last.push(Tensor { name: "meta/epoch_losses".into(), shape: vec![state.epoch_losses.len()], data: state.epoch_losses.clone() });
    write_tensors(dir.join("last.ckpt"), &last)?;
    if improved {
        write_best(dir, state)?;
    }
    Ok(())
}

fn write_best(dir: &Path, state: &TrainState) -> Result<()> {
    let mut best = state.best_weights.tensors();
    best.push(scalar("meta/best_loss", state.best_loss));
    best.push(scalar("meta/best_epoch", state.best_epoch.map_or(0.0, |e| (e + 1) as f64)));
    write_tensors(dir.join("best.ckpt"), &best)
}

/// Trains and writes the run directory. If a step diverges, the error is
/// returned and the directory keeps the last finished epoch.
pub fn train_run(
    model: &Model,
    sources: &[SourceData],
    cfg: &TrainConfig,
    excluded: Option<&str>,
    out: &Path,
    log: &mut dyn FnMut(&Event),
) -> Result<TrainState> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let meta = RunMeta {
        train: cfg.clone(),
        encoder: model.encoder.config().clone(),
        hypernet: model.hypernet.clone(),
        ot: model.ot.clone(),
        sources: sources.iter().map(|s| s.dialect_id().to_string()).collect(),
        excluded: excluded.map(str::to_string),
        corpus_hashes: sources.iter().map(|s| (s.dialect_id().to_string(), s.corpus.content_hash())).collect(),
        feature_ids: sources.first().map(|s| s.features.feature_ids().to_vec()).unwrap_or_default(),
    };
    let meta_path = out.join("config.meta");
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta).expect("run meta serializes"))
        .map_err(|e| Error::io(&meta_path, e))?;
    let hist_path = out.join("history.tsv");
    let mut history = format!("{HISTORY_HEADER}\n");
    let state = train(model, sources, cfg, &mut |ev| {
        log(&ev);
        match ev {
            Event::Step(r) => history.push_str(&history_line(r)),
            Event::Epoch { improved, state, .. } => {
                std::fs::write(&hist_path, &history).map_err(|e| Error::io(&hist_path, e))?;
                write_epoch(out, state, improved)?;
            }
            Event::Progress { .. } => {}
        }
        Ok(())
    })?;
    if state.best_epoch.is_none() {
        write_best(out, &state)?;
        std::fs::write(&hist_path, &history).map_err(|e| Error::io(&hist_path, e))?;
    }
    Ok(state)
}

/// A finished run loaded back: configuration and best weights.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub meta: RunMeta,
    pub model: Model,
    pub best: HypernetWeights,
    pub best_loss: f64,
}

impl LoadedRun {
    /// A state whose best snapshot is the stored weights, for
    /// [`zero_shot_adapt`] and evaluation.
    pub fn state(&self) -> TrainState {
        let mut s = TrainState::new(self.best.clone(), self.meta.feature_ids.clone());
        s.best_loss = self.best_loss;
        s
    }
}

/// Reads `config.meta` and `best.ckpt`. The encoder is rebuilt from its
/// configuration on the toy vocabulary.
pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let meta_path = dir.join("config.meta");
    let text = crate::audit::read_text(&meta_path)?;
    let meta: RunMeta = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: meta_path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    let encoder = Encoder::toy(meta.encoder.clone())?;
    let model = Model::new(encoder, meta.hypernet.clone(), meta.ot.clone())?;
    let ts = read_tensors(dir.join("best.ckpt"))?;
    let best = HypernetWeights::from_tensors(&model.hypernet, &ts)?;
    let best_loss = find(&ts, "meta/best_loss")?.data.first().copied().unwrap_or(f64::INFINITY);
    Ok(LoadedRun { meta, model, best, best_loss })
}

/// Parses a history file back into records.
pub fn parse_history(text: &str) -> Result<Vec<StepRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let bad = |m: &str| Error::Parse { path: "history.tsv".into(), line: n + 1, msg: m.into() };
        let f: Vec<&str> = line.split('\t').collect();
        let [step, epoch, id, loss] = f[..] else { return Err(bad("expected 4 columns")) };
        out.push(StepRecord {
            step: step.parse().map_err(|_| bad("bad step"))?,
            epoch: epoch.parse().map_err(|_| bad("bad epoch"))?,
            dialect_id: id.to_string(),
            loss: loss.parse().map_err(|_| bad("bad loss"))?,
        });
    }
    Ok(out)
}

/// Reads `<dir>/<dialect>.tsv` corpus files. The file of `exclude` is never
/// opened.
pub fn load_corpora(dir: &Path, exclude: Option<&str>) -> Result<BTreeMap<String, ParallelCorpus>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "tsv"))
        .filter(|p| exclude.is_none_or(|x| p.file_stem().and_then(|s| s.to_str()) != Some(x)))
        .collect();
    paths.sort();
    let mut out = BTreeMap::new();
    for p in paths {
        let c = ParallelCorpus::read(&p)?;
        if Some(c.dialect_id.as_str()) == exclude {
            return Err(Error::Validation(format!("{} holds the excluded dialect {}", p.display(), c.dialect_id)));
        }
        if out.insert(c.dialect_id.clone(), c).is_some() {
            return Err(Error::Validation(format!("two corpus files for one dialect in {}", dir.display())));
        }
    }
    Ok(out)
}

/// The seeded toy setup: four source dialects, one held-out target, each
/// with its own stream of toy sentences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySetup {
    pub sources: Vec<String>,
    pub target: String,
    pub sentences_per_dialect: usize,
    /// Size of the held-out target corpus.
    pub eval_sentences: usize,
    pub seed: u64,
}

impl Default for ToySetup {
    fn default() -> Self {
        Self {
            sources: ["AAVE", "IndE", "NgE", "ChcE"].map(String::from).to_vec(),
            target: "CollSgE".into(),
            sentences_per_dialect: 256,
            eval_sentences: 64,
            seed: 0,
        }
    }
}

impl ToySetup {
    fn corpus(&self, features: &BTreeMap<String, FeatureVector>, id: &str, stream: u64, n: usize) -> Result<ParallelCorpus> {
        let f = features.get(id).ok_or_else(|| Error::Schema(format!("no feature vector for {id}")))?;
        let seed = self.seed.wrapping_mul(1_000_003).wrapping_add(stream);
        build_parallel_corpus(&toy_corpus(n, seed), f, seed)
    }

    pub fn source_corpora(&self, features: &BTreeMap<String, FeatureVector>) -> Result<BTreeMap<String, ParallelCorpus>> {
        if self.sources.contains(&self.target) {
            return Err(Error::Argument(format!("target {} is also a source", self.target)));
        }
        self.sources
            .iter()
            .enumerate()
            .map(|(i, id)| Ok((id.clone(), self.corpus(features, id, i as u64 + 1, self.sentences_per_dialect)?)))
            .collect()
    }

    /// Evaluation corpus of the target, from a stream no source uses.
    pub fn target_corpus(&self, features: &BTreeMap<String, FeatureVector>) -> Result<ParallelCorpus> {
        self.corpus(features, &self.target, 0, self.eval_sentences)
    }
}

/// Every history row as TSV, header included.
pub fn history_tsv(history: &[StepRecord]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for r in history {
        let _ = write!(s, "{}", history_line(r));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::typology::builtin_ewave;

    fn small_model(feature_dim: usize) -> Model {
        let enc = EncoderConfig { d_model: 8, ff_dim: 16, n_heads: 2, n_blocks: 1, lora_rank: 2, ..Default::default() };
        Model::toy(enc, feature_dim, OTConfig { unroll_iters: 20, ..Default::default() }).unwrap()
    }

    fn small_sources(model: &Model, n: usize) -> Vec<SourceData> {
        let ew = builtin_ewave();
        let setup = ToySetup { sources: vec!["AAVE".into(), "NgE".into()], sentences_per_dialect: n, ..Default::default() };
        let corpora = setup.source_corpora(&ew).unwrap();
        let sae = precompute_sae(&corpora, &model.encoder, None).unwrap();
        prepare_sources(&corpora, &ew, &sae, Some("CollSgE")).unwrap()
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut a = Adam::new(2);
        let mut p = vec![1.0, -1.0];
        a.step(&mut p, &[0.5, -2.0], 0.1, &AdamConfig::default());
        assert!((p[0] - 0.9).abs() < 1e-7 && (p[1] + 0.9).abs() < 1e-7, "{p:?}");
    }

    #[test]
    fn sae_rows_match_token_count_and_cache_reloads_bitwise() {
        let model = small_model(236);
        let ew = builtin_ewave();
        let corpora = ToySetup { sentences_per_dialect: 5, ..Default::default() }.source_corpora(&ew).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let first = precompute_sae(&corpora, &model.encoder, Some(dir.path())).unwrap();
        let again = precompute_sae(&corpora, &model.encoder, Some(dir.path())).unwrap();
        for (id, c) in &corpora {
            let tokens: usize = c.pairs.iter().map(|p| p.sae.len()).sum();
            assert_eq!(first[id].len(), tokens);
            let bits = |p: &PointCloud| p.points().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&first[id]), bits(&again[id]));
        }
        let other = Encoder::toy(EncoderConfig { seed: 9, ..model.encoder.config().clone() }).unwrap();
        assert!(matches!(precompute_sae(&corpora, &other, Some(dir.path())), Err(Error::StaleCache { .. })));
    }

    #[test]
    fn identical_sae_sides_give_identical_clouds() {
        let model = small_model(236);
        let ew = builtin_ewave();
        let sents = toy_corpus(6, 4);
        let corpora: BTreeMap<_, _> = ["AAVE", "IndE"]
            .iter()
            .map(|id| (id.to_string(), build_parallel_corpus(&sents, &ew[*id], 1).unwrap()))
            .collect();
        let clouds = precompute_sae(&corpora, &model.encoder, None).unwrap();
        assert_eq!(clouds["AAVE"], clouds["IndE"]);
    }

    #[test]
    fn batches_pair_dialect_and_sae_sides() {
        let model = small_model(236);
        let sources = small_sources(&model, 7);
        let s = &sources[0];
        let (sents, cloud) = s.batch(&[4, 1]).unwrap();
        assert_eq!(sents[0], s.corpus.pairs[4].dialect);
        let direct = model.encoder.batch_encode(None, &[s.corpus.pairs[4].sae.clone(), s.corpus.pairs[1].sae.clone()]).unwrap();
        assert_eq!(cloud, direct);
    }

    #[test]
    fn zero_epochs_returns_initial_weights_with_initial_loss() {
        let model = small_model(236);
        let sources = small_sources(&model, 6);
        let cfg = TrainConfig { epochs: 0, batch_size: 4, ..Default::default() };
        let st = train(&model, &sources, &cfg, &mut |_| Ok(())).unwrap();
        assert_eq!(st.hw, HypernetWeights::init(&model.hypernet, 0).unwrap());
        assert_eq!(st.best_loss, mean_loss(&model, &st.hw, &sources, 4).unwrap());
        assert!(st.best_loss.is_finite());
    }

    #[test]
    fn same_seed_same_history_and_frozen_encoder_untouched() {
        let model = small_model(236);
        let before = model.encoder.weights().tensors();
        let sources = small_sources(&model, 6);
        let cfg = TrainConfig { epochs: 2, batch_size: 4, learning_rate: 1e-3, ..Default::default() };
        let a = train(&model, &sources, &cfg, &mut |_| Ok(())).unwrap();
        let b = train(&model, &sources, &cfg, &mut |_| Ok(())).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 2 * steps_per_epoch(&sources, 4));
        assert_eq!(model.encoder.weights().tensors(), before);
        assert_eq!(a.best_loss, a.epoch_losses.iter().copied().fold(f64::INFINITY, f64::min));
    }

    #[test]
    fn identical_corpora_train_as_a_no_op() {
        let model = small_model(236);
        let ew = builtin_ewave();
        let sents = toy_corpus(8, 2);
        let mut c = build_parallel_corpus(&sents, &ew["AAVE"], 0).unwrap();
        for p in &mut c.pairs {
            p.dialect = p.sae.clone();
        }
        let corpora = BTreeMap::from([("AAVE".to_string(), c)]);
        let sae = precompute_sae(&corpora, &model.encoder, None).unwrap();
        let sources = prepare_sources(&corpora, &ew, &sae, None).unwrap();
        let cfg = TrainConfig { epochs: 2, batch_size: 4, ..Default::default() };
        let st = train(&model, &sources, &cfg, &mut |_| Ok(())).unwrap();
        assert!(st.history.iter().all(|r| r.loss.abs() < 1e-9), "{:?}", st.history);
    }

    #[test]
    fn run_directory_roundtrip() {
        let model = small_model(236);
        let sources = small_sources(&model, 4);
        let cfg = TrainConfig { epochs: 2, batch_size: 2, learning_rate: 1e-3, ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        let st = train_run(&model, &sources, &cfg, Some("CollSgE"), dir.path(), &mut |_| {}).unwrap();
        let run = load_run(dir.path()).unwrap();
        assert_eq!(run.best, st.best_weights);
        assert_eq!(run.best_loss, st.best_loss);
        assert_eq!(run.meta.excluded.as_deref(), Some("CollSgE"));
        let hist = std::fs::read_to_string(dir.path().join("history.tsv")).unwrap();
        assert!(hist.starts_with(HISTORY_HEADER));
        assert_eq!(parse_history(&hist).unwrap(), st.history);
        assert!(dir.path().join("last.ckpt").exists());
    }

    #[test]
    fn zero_shot_adapt_checks_feature_universe() {
        let model = small_model(236);
        let ew = builtin_ewave();
        let hw = HypernetWeights::init(&model.hypernet, 1).unwrap();
        let st = TrainState::new(hw.clone(), ew["AAVE"].feature_ids().to_vec());
        let a = zero_shot_adapt(&st, &model.hypernet, &ew["AAVE"]).unwrap();
        assert_eq!(a, generate_lora(&hw, &ew["AAVE"], &model.hypernet).unwrap());
        let short = FeatureVector::from_pairs("X", [("1", 1.0)]).unwrap();
        assert!(matches!(zero_shot_adapt(&st, &model.hypernet, &short), Err(Error::Schema(_))));
    }
}
