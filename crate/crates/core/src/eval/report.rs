//! Evaluation reports as TSV and as plain text.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{AlignmentScores, BootstrapResult, ProbeScores};
use crate::typology::SubsetScore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub dialect_id: String,
    pub corpus_hash: String,
    pub s_eps_base: f64,
    pub s_eps_adapted: f64,
    pub acc_base: f64,
    pub acc_adapted: f64,
    /// `(s_eps_base − s_eps_adapted) / s_eps_base`
    pub relative_improvement: f64,
}

impl EvalRecord {
    pub fn new(dialect_id: &str, corpus_hash: String, a: AlignmentScores, p: &ProbeScores) -> Self {
        Self {
            dialect_id: dialect_id.to_string(),
            corpus_hash,
            s_eps_base: a.s_eps_base,
            s_eps_adapted: a.s_eps_adapted,
            acc_base: p.acc_base,
            acc_adapted: p.acc_adapted,
            relative_improvement: (a.s_eps_base - a.s_eps_adapted) / a.s_eps_base,
        }
    }
}

/// What produced a report. `command` is the invocation that regenerates it.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunInfo {
    pub command: String,
    pub seeds: BTreeMap<String, u64>,
    /// JSON of each configuration involved.
    pub configs: BTreeMap<String, String>,
    pub corpus_hashes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub info: RunInfo,
    pub records: Vec<EvalRecord>,
    pub bootstrap: Option<BootstrapResult>,
}

pub const EVAL_TSV_HEADER: &str =
    "dialect_id\ts_eps_base\ts_eps_adapted\trelative_improvement\tacc_base\tacc_adapted\tcorpus_hash";

fn meta_lines(info: &RunInfo) -> String {
    let mut s = format!("#command={}\n", info.command);
    for (k, v) in &info.seeds {
        let _ = writeln!(s, "#seed.{k}={v}");
    }
    for (k, v) in &info.configs {
        let _ = writeln!(s, "#config.{k}={v}");
    }
    for (k, v) in &info.corpus_hashes {
        let _ = writeln!(s, "#corpus.{k}={v}");
    }
    s
}

impl EvalReport {
    /// Metadata as `#key=value` lines, then one row per dialect. Floats are
    /// written in shortest round-trip form.
    pub fn to_tsv(&self) -> String {
        let mut s = meta_lines(&self.info);
        if let Some(b) = &self.bootstrap {
            let _ = writeln!(
                s,
                "#bootstrap=delta {:?} p {:?} n {} alpha {:?} significant {}",
                b.observed_delta, b.p_value, b.n_resamples, b.alpha, b.significant
            );
        }
        s.push_str(EVAL_TSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}\t{}",
                r.dialect_id, r.s_eps_base, r.s_eps_adapted, r.relative_improvement, r.acc_base, r.acc_adapted, r.corpus_hash
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let _ = writeln!(
                s,
                "{}: S_eps {:.4} -> {:.4} ({:+.1}%), probe accuracy {:.3} -> {:.3}",
                r.dialect_id,
                r.s_eps_base,
                r.s_eps_adapted,
                -100.0 * r.relative_improvement,
                r.acc_base,
                r.acc_adapted
            );
        }
        if let Some(b) = &self.bootstrap {
            let _ = writeln!(
                s,
                "paired bootstrap (adapted vs base): delta {:+.4}, p = {:.4} over {} resamples, {} at alpha {}",
                b.observed_delta,
                b.p_value,
                b.n_resamples,
                if b.significant { "significant" } else { "not significant" },
                b.alpha
            );
        }
        let _ = writeln!(s, "reproduce with: {}", self.info.command);
        s
    }
}

/// One line of a source sweep; `scores` is present for trained subsets.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub score: SubsetScore,
    pub scores: Option<AlignmentScores>,
}

pub const SWEEP_TSV_HEADER: &str = "sources\tl1\tcoverage\tpareto_rank\ts_eps_base\ts_eps_adapted";

impl SweepRow {
    pub fn tsv_line(&self) -> String {
        let (b, a) = match self.scores {
            Some(s) => (format!("{:?}", s.s_eps_base), format!("{:?}", s.s_eps_adapted)),
            None => ("-".into(), "-".into()),
        };
        format!(
            "{}\t{:.3}\t{:.3}\t{}\t{b}\t{a}",
            self.score.dialect_ids.join(","),
            self.score.l1,
            self.score.coverage,
            self.score.pareto_rank
        )
    }
}
