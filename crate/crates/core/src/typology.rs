//! Dialect feature vectors and the typology metrics built on them.
//!
//! A feature vector holds one application rate in `[0, 1]` per morphosyntactic
//! feature. Rates come from expert attestation levels (see [`Attestation`]).
//! On top of the vectors this module provides the Manhattan distance, the
//! multi-source coverage score and an exhaustive source-set selector that
//! exposes the (low distance, high coverage) Pareto frontier.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use crate::{Error, Result};

const EWAVE_VECTORS: &str = include_str!("../data/ewave_vectors.tsv");
const MULTIVALUE_RULE_FEATURES: &str = include_str!("../data/multivalue_rule_features.txt");

/// Expert attestation level of a feature in a dialect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Attestation {
    Obligatory,
    NeitherPervasiveNorRare,
    Rare,
    AbsentOrUnknown,
}

impl Attestation {
    /// Parses an eWAVE letter: `A`, `B`, `C`, or one of `D`, `X`, `?`.
    pub fn from_letter(s: &str) -> Option<Self> {
        match s {
            "A" => Some(Attestation::Obligatory),
            "B" => Some(Attestation::NeitherPervasiveNorRare),
            "C" => Some(Attestation::Rare),
            "D" | "X" | "?" => Some(Attestation::AbsentOrUnknown),
            _ => None,
        }
    }

    pub fn rate(self) -> f64 {
        rate_from_attestation(self)
    }
}

/// Application rate used when generating pseudo-dialect text.
pub fn rate_from_attestation(code: Attestation) -> f64 {
    match code {
        Attestation::Obligatory => 1.0,
        Attestation::NeitherPervasiveNorRare => 0.6,
        Attestation::Rare => 0.3,
        Attestation::AbsentOrUnknown => 0.0,
    }
}

/// Per-dialect vector of feature application rates.
///
/// The feature id list is shared between all vectors loaded from the same
/// file, and two vectors are comparable only when their id lists match.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    dialect_id: String,
    feature_ids: Arc<Vec<String>>,
    rates: Vec<f64>,
}

impl FeatureVector {
    pub fn new(
        dialect_id: impl Into<String>,
        feature_ids: Arc<Vec<String>>,
        rates: Vec<f64>,
    ) -> Result<Self> {
        let dialect_id = dialect_id.into();
        if rates.len() != feature_ids.len() {
            return Err(Error::Schema(format!(
                "{dialect_id}: {} rates for {} feature ids",
                rates.len(),
                feature_ids.len()
            )));
        }
        let mut seen = HashSet::with_capacity(feature_ids.len());
        for id in feature_ids.iter() {
            if !seen.insert(id.as_str()) {
                return Err(Error::Schema(format!("duplicate feature id {id:?}")));
            }
        }
        for (id, &r) in feature_ids.iter().zip(&rates) {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Validation(format!(
                    "{dialect_id}: rate {r} for feature {id} is outside [0, 1]"
                )));
            }
        }
        Ok(Self {
            dialect_id,
            feature_ids,
            rates,
        })
    }

    /// Builds a vector over a fresh feature universe.
    pub fn from_pairs<I, S>(dialect_id: impl Into<String>, pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let (ids, rates): (Vec<String>, Vec<f64>) =
            pairs.into_iter().map(|(s, r)| (s.into(), r)).unzip();
        Self::new(dialect_id, Arc::new(ids), rates)
    }

    /// A vector over the same features with a new id and rates.
    pub fn with_rates(&self, dialect_id: impl Into<String>, rates: Vec<f64>) -> Result<Self> {
        Self::new(dialect_id, Arc::clone(&self.feature_ids), rates)
    }

    pub fn dialect_id(&self) -> &str {
        &self.dialect_id
    }

    pub fn feature_ids(&self) -> &[String] {
        &self.feature_ids
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    /// Rate of a feature by id; features outside the universe have rate 0.
    pub fn rate(&self, feature_id: &str) -> f64 {
        self.feature_ids
            .iter()
            .position(|f| f == feature_id)
            .map_or(0.0, |i| self.rates[i])
    }

    pub fn is_comparable(&self, other: &FeatureVector) -> bool {
        Arc::ptr_eq(&self.feature_ids, &other.feature_ids) || self.feature_ids == other.feature_ids
    }

    /// Number of features with a nonzero rate, optionally restricted to a set
    /// of feature ids.
    pub fn attested_count(&self, restrict: Option<&HashSet<String>>) -> usize {
        self.feature_ids
            .iter()
            .zip(&self.rates)
            .filter(|(id, &r)| r > 0.0 && restrict.is_none_or(|set| set.contains(*id)))
            .count()
    }

    fn check_comparable(&self, other: &FeatureVector) -> Result<()> {
        if self.is_comparable(other) {
            Ok(())
        } else {
            Err(Error::Schema(format!(
                "feature vectors {} and {} use different feature sets",
                self.dialect_id, other.dialect_id
            )))
        }
    }
}

/// Parses the tab-separated feature-vector format.
///
/// ```text
/// #features=<F>
/// <dialect_id>\t<feature_id>\t<value>
/// ```
///
/// `value` is an attestation letter (`A`, `B`, `C`, `D`, `X`, `?`) or a
/// decimal rate. Every dialect must list exactly the same `F` features; the
/// feature order is the order of first appearance.
pub fn parse_feature_vectors(text: &str, source: &str) -> Result<BTreeMap<String, FeatureVector>> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: source.to_string(),
        line,
        msg,
    };

    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let declared: usize = loop {
        match lines.next() {
            None => return Err(parse_err(1, "missing `#features=<F>` header".into())),
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((n, l)) => {
                let v = l
                    .trim()
                    .strip_prefix("#features=")
                    .ok_or_else(|| parse_err(n, "expected `#features=<F>` header".into()))?;
                break v
                    .parse()
                    .map_err(|_| parse_err(n, format!("bad feature count {v:?}")))?;
            }
        }
    };

    let mut universe: Vec<String> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    let mut per_dialect: BTreeMap<String, BTreeMap<String, (usize, f64)>> = BTreeMap::new();

    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(
                n,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let (dialect, feature, value) = (fields[0].trim(), fields[1].trim(), fields[2].trim());
        if dialect.is_empty() || feature.is_empty() {
            return Err(parse_err(n, "empty dialect or feature id".into()));
        }
        let rate = match Attestation::from_letter(value) {
            Some(a) => a.rate(),
            None => value
                .parse::<f64>()
                .map_err(|_| parse_err(n, format!("bad value {value:?}")))?,
        };
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::Validation(format!(
                "{source}:{n}: rate {rate} for {dialect}/{feature} is outside [0, 1]"
            )));
        }
        if !index.contains_key(feature) {
            index.insert(feature.to_string(), universe.len());
            universe.push(feature.to_string());
        }
        let entry = per_dialect.entry(dialect.to_string()).or_default();
        if entry.insert(feature.to_string(), (n, rate)).is_some() {
            return Err(parse_err(n, format!("duplicate record for {dialect}/{feature}")));
        }
    }

    if universe.len() != declared {
        return Err(Error::Schema(format!(
            "{source}: header declares {declared} features but records use {}",
            universe.len()
        )));
    }
    let universe = Arc::new(universe);
    let mut out = BTreeMap::new();
    for (dialect, records) in per_dialect {
        if records.len() != universe.len() {
            let missing: Vec<&str> = universe
                .iter()
                .filter(|f| !records.contains_key(*f))
                .take(3)
                .map(String::as_str)
                .collect();
            return Err(Error::Schema(format!(
                "{source}: dialect {dialect} lists {} of {} features (missing e.g. {missing:?})",
                records.len(),
                universe.len()
            )));
        }
        let mut rates = vec![0.0; universe.len()];
        for (feature, (_, r)) in &records {
            rates[index[feature]] = *r;
        }
        let v = FeatureVector::new(dialect.clone(), Arc::clone(&universe), rates)?;
        out.insert(dialect, v);
    }
    Ok(out)
}

/// Loads a feature-vector file (see [`parse_feature_vectors`]).
pub fn load_feature_vectors(path: impl AsRef<Path>) -> Result<BTreeMap<String, FeatureVector>> {
    let path = path.as_ref();
    let text = crate::audit::read_text(path)?;
    parse_feature_vectors(&text, &path.display().to_string())
}

/// The bundled eWAVE vectors for the 50 varieties covered by Multi-VALUE
/// (236 feature ids).
pub fn builtin_ewave() -> BTreeMap<String, FeatureVector> {
    parse_feature_vectors(EWAVE_VECTORS, "ewave_vectors.tsv").expect("bundled data parses")
}

/// Feature ids that have a Multi-VALUE transformation rule.
pub fn multivalue_rule_features() -> HashSet<String> {
    MULTIVALUE_RULE_FEATURES
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect()
}

/// Raw Manhattan distance `Σ |a_i − b_i|`.
pub fn manhattan_distance(a: &FeatureVector, b: &FeatureVector) -> Result<f64> {
    a.check_comparable(b)?;
    Ok(l1(&a.rates, &b.rates))
}

/// Manhattan distance divided by the number of features.
pub fn normalized_manhattan_distance(a: &FeatureVector, b: &FeatureVector) -> Result<f64> {
    let d = manhattan_distance(a, b)?;
    Ok(if a.is_empty() { 0.0 } else { d / a.len() as f64 })
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Non-empty set of source dialects sharing one feature universe.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSet {
    dialects: Vec<FeatureVector>,
}

impl SourceSet {
    pub fn new(dialects: Vec<FeatureVector>) -> Result<Self> {
        let first = dialects
            .first()
            .ok_or_else(|| Error::Argument("a source set needs at least one dialect".into()))?;
        for d in &dialects[1..] {
            first.check_comparable(d)?;
        }
        let mut seen = HashSet::new();
        for d in &dialects {
            if !seen.insert(d.dialect_id()) {
                return Err(Error::Argument(format!(
                    "dialect {} appears twice in the source set",
                    d.dialect_id()
                )));
            }
        }
        Ok(Self { dialects })
    }

    /// Picks the named dialects out of a loaded map.
    pub fn from_ids<S: AsRef<str>>(
        all: &BTreeMap<String, FeatureVector>,
        ids: &[S],
    ) -> Result<Self> {
        let dialects = ids
            .iter()
            .map(|id| {
                all.get(id.as_ref())
                    .cloned()
                    .ok_or_else(|| Error::Argument(format!("unknown dialect {:?}", id.as_ref())))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(dialects)
    }

    pub fn dialects(&self) -> &[FeatureVector] {
        &self.dialects
    }

    pub fn ids(&self) -> Vec<&str> {
        self.dialects.iter().map(|d| d.dialect_id()).collect()
    }

    pub fn contains(&self, dialect_id: &str) -> bool {
        self.dialects.iter().any(|d| d.dialect_id() == dialect_id)
    }

    /// Mean over sources of the per-feature normalized Manhattan distance to
    /// `target`. This is the "average L1" used to compare source sets.
    pub fn mean_normalized_l1(&self, target: &FeatureVector) -> Result<f64> {
        let mut total = 0.0;
        for s in &self.dialects {
            total += normalized_manhattan_distance(s, target)?;
        }
        Ok(total / self.dialects.len() as f64)
    }
}

/// Share of the target's weighted features accounted for by the summed
/// source vectors: `1 − ‖[Σ_s d_s − d_t]₋‖₁ / ‖d_t‖₁`.
pub fn coverage(sources: &SourceSet, target: &FeatureVector) -> Result<f64> {
    for s in sources.dialects() {
        s.check_comparable(target)?;
    }
    let rows: Vec<&[f64]> = sources.dialects().iter().map(|d| d.rates()).collect();
    coverage_of_rows(&rows, target.rates())
}

fn coverage_of_rows(rows: &[&[f64]], target: &[f64]) -> Result<f64> {
    let mass: f64 = target.iter().sum();
    if mass <= 0.0 {
        return Err(Error::DegenerateTarget);
    }
    let mut uncovered = 0.0;
    for (i, &t) in target.iter().enumerate() {
        let s: f64 = rows.iter().map(|r| r[i]).sum();
        let gap = s - t;
        if gap < 0.0 {
            uncovered -= gap;
        }
    }
    Ok(1.0 - uncovered / mass)
}

/// Typology scores of one candidate source set.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetScore {
    /// Member ids, sorted.
    pub dialect_ids: Vec<String>,
    /// Mean normalized Manhattan distance to the target.
    pub l1: f64,
    pub coverage: f64,
    /// 1 for the Pareto frontier (minimise `l1`, maximise `coverage`), 2 for
    /// the frontier of the remainder, and so on.
    pub pareto_rank: usize,
}

impl SubsetScore {
    /// `true` when `self` is at least as good in both metrics and strictly
    /// better in one.
    pub fn dominates(&self, other: &SubsetScore) -> bool {
        self.l1 <= other.l1
            && self.coverage >= other.coverage
            && (self.l1 < other.l1 || self.coverage > other.coverage)
    }
}

/// Scores every `k`-subset of `candidates` against `target`.
///
/// The result is sorted by Pareto rank, then by ascending L1, descending
/// coverage and finally the sorted member ids, so it does not depend on the
/// order of `candidates`.
pub fn select_sources(
    candidates: &[FeatureVector],
    target: &FeatureVector,
    k: usize,
) -> Result<Vec<SubsetScore>> {
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    if k > candidates.len() {
        return Err(Error::Argument(format!(
            "k = {k} exceeds the {} candidates",
            candidates.len()
        )));
    }
    if target.rates().iter().sum::<f64>() <= 0.0 {
        return Err(Error::DegenerateTarget);
    }
    let mut sorted: Vec<&FeatureVector> = candidates.iter().collect();
    sorted.sort_by(|a, b| a.dialect_id().cmp(b.dialect_id()));
    for w in sorted.windows(2) {
        if w[0].dialect_id() == w[1].dialect_id() {
            return Err(Error::Argument(format!("duplicate candidate {}", w[0].dialect_id())));
        }
    }
    for c in &sorted {
        if c.dialect_id() == target.dialect_id() {
            return Err(Error::Argument(format!(
                "target {} must not be among the candidates",
                target.dialect_id()
            )));
        }
        c.check_comparable(target)?;
    }

    let dist: Vec<f64> = sorted
        .iter()
        .map(|c| normalized_manhattan_distance(c, target))
        .collect::<Result<_>>()?;

    let mut scores = Vec::new();
    let mut combo: Vec<usize> = (0..k).collect();
    let n = sorted.len();
    loop {
        let rows: Vec<&[f64]> = combo.iter().map(|&i| sorted[i].rates()).collect();
        let l1 = combo.iter().map(|&i| dist[i]).sum::<f64>() / k as f64;
        let cov = coverage_of_rows(&rows, target.rates())?;
        scores.push(SubsetScore {
            dialect_ids: combo.iter().map(|&i| sorted[i].dialect_id().to_string()).collect(),
            l1,
            coverage: cov,
            pareto_rank: 0,
        });
        if !next_combination(&mut combo, n) {
            break;
        }
    }

    let points: Vec<(f64, f64)> = scores.iter().map(|s| (s.l1, s.coverage)).collect();
    for (s, r) in scores.iter_mut().zip(pareto_ranks(&points)) {
        s.pareto_rank = r;
    }
    scores.sort_by(|a, b| {
        a.pareto_rank
            .cmp(&b.pareto_rank)
            .then(typology_order(a, b))
    });
    Ok(scores)
}

/// Ascending L1, then descending coverage, then member ids. Any subset that
/// dominates another sorts before it.
pub fn typology_order(a: &SubsetScore, b: &SubsetScore) -> Ordering {
    a.l1.total_cmp(&b.l1)
        .then(b.coverage.total_cmp(&a.coverage))
        .then_with(|| a.dialect_ids.cmp(&b.dialect_ids))
}

/// Advances `combo` to the next k-combination of `0..n` in lexicographic
/// order; returns `false` after the last one.
fn next_combination(combo: &mut [usize], n: usize) -> bool {
    let k = combo.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if combo[i] < n - k + i {
            combo[i] += 1;
            for j in i + 1..k {
                combo[j] = combo[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Non-dominated sorting for points `(cost, gain)` where lower cost and
/// higher gain are better. Returns 1-based layer indices.
pub fn pareto_ranks(points: &[(f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .0
            .total_cmp(&points[b].0)
            .then(points[b].1.total_cmp(&points[a].1))
    });
    // best_gain[layer] is non-increasing in layer.
    let mut best_gain: Vec<f64> = Vec::new();
    let mut ranks = vec![0; points.len()];
    let mut g = 0;
    while g < order.len() {
        let mut h = g + 1;
        while h < order.len() && points[order[h]] == points[order[g]] {
            h += 1;
        }
        let gain = points[order[g]].1;
        let layer = best_gain.partition_point(|&b| b >= gain);
        for &i in &order[g..h] {
            ranks[i] = layer + 1;
        }
        if layer == best_gain.len() {
            best_gain.push(gain);
        } else if gain > best_gain[layer] {
            best_gain[layer] = gain;
        }
        g = h;
    }
    ranks
}
