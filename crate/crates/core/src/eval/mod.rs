//! Zero-shot evaluation: representation alignment, a linear probe, the
//! paired bootstrap and source-selection sweeps.

mod bootstrap;
mod probe;
mod report;

pub use bootstrap::{paired_bootstrap, BootstrapResult, DEFAULT_RESAMPLES};
pub use probe::{mean_pool, LinearProbe, ProbeConfig};
pub use report::{EvalRecord, EvalReport, RunInfo, SweepRow, EVAL_TSV_HEADER, SWEEP_TSV_HEADER};

use std::collections::BTreeMap;

use crate::encoder::LoraParamSet;
use crate::ot::sinkhorn_divergence;
use crate::trainer::{zero_shot_adapt, Model, TrainState};
use crate::transform::{toy::animal_label, ParallelCorpus};
use crate::typology::{select_sources, FeatureVector};
use crate::{Error, Result};

/// Divergences of the target's dialect cloud from its SAE cloud.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentScores {
    pub s_eps_base: f64,
    pub s_eps_adapted: f64,
}

fn check_target(state: &TrainState, target: &FeatureVector, corpus: &ParallelCorpus) -> Result<()> {
    if corpus.dialect_id != target.dialect_id() {
        return Err(Error::Argument(format!(
            "corpus holds {} but the target is {}",
            corpus.dialect_id,
            target.dialect_id()
        )));
    }
    if state.history.iter().any(|r| r.dialect_id == target.dialect_id()) {
        return Err(Error::Argument(format!("{} was a training source", target.dialect_id())));
    }
    Ok(())
}

/// Converged Sinkhorn divergence between the dialect and SAE clouds of the
/// whole corpus, without and with the zero-shot adapter.
pub fn eval_alignment(
    model: &Model,
    state: &TrainState,
    target: &FeatureVector,
    corpus: &ParallelCorpus,
) -> Result<AlignmentScores> {
    check_target(state, target, corpus)?;
    let lora = zero_shot_adapt(state, &model.hypernet, target)?;
    alignment_with(model, &lora, corpus)
}

/// Alignment scores for a given adapter.
pub fn alignment_with(model: &Model, lora: &LoraParamSet, corpus: &ParallelCorpus) -> Result<AlignmentScores> {
    let enc = &model.encoder;
    let sae = enc.batch_encode(None, &corpus.sae_sentences())?;
    let dialect = corpus.dialect_sentences();
    let base_cloud = enc.batch_encode(None, &dialect)?;
    let s_eps_base = sinkhorn_divergence(&base_cloud, &sae, &model.ot)?;
    let s_eps_adapted = if lora.is_zero() {
        s_eps_base
    } else {
        sinkhorn_divergence(&enc.batch_encode(Some(lora), &dialect)?, &sae, &model.ot)?
    };
    Ok(AlignmentScores { s_eps_base, s_eps_adapted })
}

/// Probe accuracies on the target's dialect side.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeScores {
    pub acc_base: f64,
    pub acc_adapted: f64,
    /// Per-sentence correctness, for the paired bootstrap.
    pub correct_base: Vec<bool>,
    pub correct_adapted: Vec<bool>,
}

/// Fits a probe for the animal label on SAE sentences drawn with
/// `probe_seed`, then scores the dialect side of `corpus` without and with
/// the zero-shot adapter. Labels come from the SAE side of each pair.
pub fn eval_probe(
    model: &Model,
    state: &TrainState,
    target: &FeatureVector,
    corpus: &ParallelCorpus,
    probe_seed: u64,
) -> Result<ProbeScores> {
    check_target(state, target, corpus)?;
    let cfg = ProbeConfig { seed: probe_seed, ..ProbeConfig::default() };
    let probe = LinearProbe::fit_toy(&model.encoder, &cfg)?;
    let lora = zero_shot_adapt(state, &model.hypernet, target)?;
    let labels: Vec<bool> = corpus.pairs.iter().map(|p| animal_label(&p.sae)).collect();
    probe_with(model, &probe, &lora, corpus, &labels)
}

/// Scores an already fitted probe.
pub fn probe_with(
    model: &Model,
    probe: &LinearProbe,
    lora: &LoraParamSet,
    corpus: &ParallelCorpus,
    labels: &[bool],
) -> Result<ProbeScores> {
    if labels.len() != corpus.len() {
        return Err(Error::Argument(format!("{} labels for {} pairs", labels.len(), corpus.len())));
    }
    let dialect = corpus.dialect_sentences();
    let predict = |lora: Option<&LoraParamSet>| -> Result<Vec<bool>> {
        let x = mean_pool(&model.encoder, lora, &dialect)?;
        Ok(probe.predict(&x).into_iter().zip(labels).map(|(p, &y)| p == y).collect())
    };
    let correct_base = predict(None)?;
    let correct_adapted = if lora.is_zero() { correct_base.clone() } else { predict(Some(lora))? };
    let acc = |c: &[bool]| c.iter().filter(|&&x| x).count() as f64 / c.len().max(1) as f64;
    Ok(ProbeScores {
        acc_base: acc(&correct_base),
        acc_adapted: acc(&correct_adapted),
        correct_base,
        correct_adapted,
    })
}

/// Full evaluation record of one target.
pub fn evaluate(
    model: &Model,
    state: &TrainState,
    target: &FeatureVector,
    corpus: &ParallelCorpus,
    probe_seed: u64,
) -> Result<EvalRecord> {
    let a = eval_alignment(model, state, target, corpus)?;
    let p = eval_probe(model, state, target, corpus, probe_seed)?;
    Ok(EvalRecord::new(target.dialect_id(), corpus.content_hash(), a, &p))
}

/// Ranks every `k`-subset of `candidates` for `target`, then trains and
/// evaluates the best `budget` of them with `run`. With budget 0 only the
/// typology table is produced.
pub fn sweep_sources(
    candidates: &BTreeMap<String, FeatureVector>,
    target: &FeatureVector,
    k: usize,
    budget: usize,
    run: &mut dyn FnMut(&[String]) -> Result<AlignmentScores>,
) -> Result<Vec<SweepRow>> {
    let pool: Vec<FeatureVector> =
        candidates.values().filter(|f| f.dialect_id() != target.dialect_id()).cloned().collect();
    let ranked = select_sources(&pool, target, k)?;
    ranked
        .into_iter()
        .enumerate()
        .map(|(i, score)| {
            let scores = if i < budget { Some(run(&score.dialect_ids)?) } else { None };
            Ok(SweepRow { score, scores })
        })
        .collect()
}
