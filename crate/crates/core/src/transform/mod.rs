//! Pseudo-dialect generation.
//!
//! Each catalog rule fires on an applicable sentence with probability equal
//! to the dialect's rate for the matching feature id. Random draws come from
//! a counter-based stream keyed by `(seed, sentence index, rule index)`, so
//! a corpus does not depend on the order in which sentences are processed.

mod rules;
pub mod toy;

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::typology::FeatureVector;
use crate::{Error, Result};

pub use rules::{catalog, rule_by_id, RewriteRule};

/// A tokenized sentence with optional coarse part-of-speech tags.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSentence {
    pub tokens: Vec<String>,
    pub tags: Option<Vec<String>>,
}

impl TokenSentence {
    pub fn new(tokens: Vec<String>, tags: Option<Vec<String>>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Validation("empty sentence".into()));
        }
        if let Some(t) = &tags {
            if t.len() != tokens.len() {
                return Err(Error::Validation(format!(
                    "{} tags for {} tokens",
                    t.len(),
                    tokens.len()
                )));
            }
        }
        Ok(Self { tokens, tags })
    }

    /// Parses `tok tok …` or `tok|TAG tok|TAG …`. Tags must be given for all
    /// tokens or none.
    pub fn parse(line: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut tags = Vec::new();
        for item in line.split_whitespace() {
            match item.rsplit_once('|') {
                Some((w, t)) if !w.is_empty() && !t.is_empty() => {
                    tokens.push(w.to_string());
                    tags.push(Some(t.to_string()));
                }
                _ => {
                    tokens.push(item.to_string());
                    tags.push(None);
                }
            }
        }
        let tagged = tags.iter().filter(|t| t.is_some()).count();
        let tags = if tagged == 0 {
            None
        } else if tagged == tags.len() {
            Some(tags.into_iter().flatten().collect())
        } else {
            return Err(Error::Validation(format!("mixed tagged and untagged tokens in {line:?}")));
        };
        Self::new(tokens, tags)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens joined by spaces, without tags.
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Writes the corpus-file form, with `|tag` suffixes when tags exist.
impl fmt::Display for TokenSentence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, tok) in self.tokens.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            f.write_str(tok)?;
            if let Some(t) = &self.tags {
                write!(f, "|{}", t[i])?;
            }
        }
        Ok(())
    }
}

/// Uniform draw in `[0, 1)` for one `(sentence, rule)` cell of the stream.
pub fn rule_uniform(seed: u64, sentence_index: u64, rule_index: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sentence_index);
    rng.set_word_pos(2 * rule_index as u128);
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Applies the catalog in order, firing each applicable rule independently
/// with its rate in `d`.
pub fn transform_sentence(
    s: &TokenSentence,
    d: &FeatureVector,
    seed: u64,
    sentence_index: u64,
) -> (TokenSentence, BTreeSet<String>) {
    let mut out = s.clone();
    let mut applied = BTreeSet::new();
    for (k, rule) in catalog().iter().enumerate() {
        let rate = d.rate(rule.id);
        if rate <= 0.0 || !rule.applicable(&out) {
            continue;
        }
        if rule_uniform(seed, sentence_index, k) < rate {
            out = rule.rewrite(&out);
            applied.insert(rule.id.to_string());
        }
    }
    (out, applied)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentencePair {
    pub sae: TokenSentence,
    pub dialect: TokenSentence,
    pub applied_rules: BTreeSet<String>,
}

/// Aligned standard / pseudo-dialect sentences.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelCorpus {
    pub dialect_id: String,
    pub seed: u64,
    pub pairs: Vec<SentencePair>,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sae_sentences(&self) -> Vec<TokenSentence> {
        self.pairs.iter().map(|p| p.sae.clone()).collect()
    }

    pub fn dialect_sentences(&self) -> Vec<TokenSentence> {
        self.pairs.iter().map(|p| p.dialect.clone()).collect()
    }

    /// SHA-256 over the SAE side, hex encoded.
    pub fn sae_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.pairs {
            h.update(p.sae.to_string().as_bytes());
            h.update(b"\n");
        }
        hex(&h.finalize())
    }

    /// SHA-256 over the whole record file form.
    pub fn content_hash(&self) -> String {
        hex(&Sha256::digest(self.to_tsv().as_bytes()))
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("#dialect={}\tseed={}\n", self.dialect_id, self.seed);
        for p in &self.pairs {
            let ids: Vec<&str> = p.applied_rules.iter().map(String::as_str).collect();
            out.push_str(&format!("{}\t{}\t{}\n", p.sae, p.dialect, ids.join(",")));
        }
        out
    }

    /// Parses the record format. The optional `#dialect=… seed=…` header
    /// fills in the metadata; otherwise `fallback_id` and seed 0 are used.
    pub fn parse_tsv(text: &str, fallback_id: &str, source: &str) -> Result<Self> {
        let mut dialect_id = fallback_id.to_string();
        let mut seed = 0;
        let mut pairs = Vec::new();
        let known: BTreeSet<&str> = catalog().iter().map(|r| r.id).collect();
        for (n, line) in text.lines().enumerate() {
            let perr = |msg: String| Error::Parse { path: source.to_string(), line: n + 1, msg };
            if let Some(meta) = line.strip_prefix('#') {
                for kv in meta.split('\t') {
                    match kv.split_once('=') {
                        Some(("dialect", v)) => dialect_id = v.to_string(),
                        Some(("seed", v)) => {
                            seed = v.parse().map_err(|_| perr(format!("bad seed {v:?}")))?
                        }
                        _ => {}
                    }
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(perr(format!("expected 3 tab-separated fields, found {}", fields.len())));
            }
            let sae = TokenSentence::parse(fields[0]).map_err(|e| perr(e.to_string()))?;
            let dialect = TokenSentence::parse(fields[1]).map_err(|e| perr(e.to_string()))?;
            let mut applied_rules = BTreeSet::new();
            for id in fields[2].split(',').filter(|s| !s.is_empty()) {
                if !known.contains(id) {
                    return Err(perr(format!("unknown rule id {id:?}")));
                }
                applied_rules.insert(id.to_string());
            }
            pairs.push(SentencePair { sae, dialect, applied_rules });
        }
        if pairs.is_empty() {
            return Err(Error::Validation(format!("{source}: parallel corpus has no records")));
        }
        Ok(Self { dialect_id, seed, pairs })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = crate::audit::read_text(path)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        Self::parse_tsv(&text, stem, &path.display().to_string())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn build_parallel_corpus(
    sentences: &[TokenSentence],
    d: &FeatureVector,
    seed: u64,
) -> Result<ParallelCorpus> {
    if sentences.is_empty() {
        return Err(Error::Argument("cannot build a corpus from zero sentences".into()));
    }
    let pairs = sentences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (dialect, applied_rules) = transform_sentence(s, d, seed, i as u64);
            SentencePair { sae: s.clone(), dialect, applied_rules }
        })
        .collect();
    Ok(ParallelCorpus { dialect_id: d.dialect_id().to_string(), seed, pairs })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusStats {
    pub pct_transformed: f64,
    pub applied_feature_count: usize,
}

pub fn corpus_stats(c: &ParallelCorpus) -> CorpusStats {
    if c.pairs.is_empty() {
        return CorpusStats { pct_transformed: 0.0, applied_feature_count: 0 };
    }
    let changed = c.pairs.iter().filter(|p| p.dialect.tokens != p.sae.tokens).count();
    let features: BTreeSet<&String> = c.pairs.iter().flat_map(|p| &p.applied_rules).collect();
    CorpusStats {
        pct_transformed: 100.0 * changed as f64 / c.pairs.len() as f64,
        applied_feature_count: features.len(),
    }
}

/// Reads a corpus file: one sentence per line, blank lines skipped.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<TokenSentence>> {
    let path = path.as_ref();
    let text = crate::audit::read_text(path)?;
    parse_corpus(&text, &path.display().to_string())
}

pub fn parse_corpus(text: &str, source: &str) -> Result<Vec<TokenSentence>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            TokenSentence::parse(l).map_err(|e| Error::Parse {
                path: source.to_string(),
                line: n + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn write_corpus(path: impl AsRef<Path>, sentences: &[TokenSentence]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for s in sentences {
        text.push_str(&s.to_string());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Feature vector over the catalog ids with the given rates, in catalog
/// order.
pub fn catalog_vector(dialect_id: &str, rates: &[f64]) -> Result<FeatureVector> {
    if rates.len() != catalog().len() {
        return Err(Error::Argument(format!(
            "{} rates for {} catalog rules",
            rates.len(),
            catalog().len()
        )));
    }
    FeatureVector::from_pairs(dialect_id, catalog().iter().map(|r| r.id).zip(rates.iter().copied()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn zero_vector() -> FeatureVector {
        catalog_vector("Z", &[0.0; 12]).unwrap()
    }

    #[test]
    fn parse_roundtrip() {
        let s = TokenSentence::parse("the|DET dog|NOUN barks|VERB").unwrap();
        assert_eq!(s.tags.as_ref().unwrap()[1], "NOUN");
        assert_eq!(TokenSentence::parse(&s.to_string()).unwrap(), s);
        assert!(TokenSentence::parse("the|DET dog").is_err());
        assert!(TokenSentence::parse("   ").is_err());
    }

    #[test]
    fn zero_rates_are_identity() {
        let s = toy::toy_corpus(3, 1);
        let c = build_parallel_corpus(&s, &zero_vector(), 5).unwrap();
        assert_eq!(c.len(), 3);
        for p in &c.pairs {
            assert_eq!(p.sae, p.dialect);
            assert!(p.applied_rules.is_empty());
        }
        let st = corpus_stats(&c);
        assert_eq!(st.pct_transformed, 0.0);
        assert_eq!(st.applied_feature_count, 0);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(matches!(build_parallel_corpus(&[], &zero_vector(), 0), Err(Error::Argument(_))));
    }

    #[test]
    fn possessive_example_at_rate_one() {
        let s = TokenSentence::parse("the girlfriend of the man I met is a real beauty").unwrap();
        let d = FeatureVector::from_pairs("X", [("72", 1.0)]).unwrap();
        let (out, applied) = transform_sentence(&s, &d, 0, 0);
        assert_eq!(out.text(), "the man I met 's girlfriend is a real beauty");
        assert_eq!(applied.into_iter().collect::<Vec<_>>(), vec!["72".to_string()]);
    }

    #[test]
    fn tsv_roundtrip() {
        let d = catalog_vector("D", &[0.6; 12]).unwrap();
        let c = build_parallel_corpus(&toy::toy_corpus(40, 2), &d, 11).unwrap();
        let back = ParallelCorpus::parse_tsv(&c.to_tsv(), "x", "mem").unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn uniform_stream_is_keyed_by_cell() {
        let a = rule_uniform(1, 2, 3);
        assert_eq!(a, rule_uniform(1, 2, 3));
        assert_ne!(a, rule_uniform(1, 2, 4));
        assert_ne!(a, rule_uniform(1, 3, 3));
        assert!((0.0..1.0).contains(&a));
    }

    proptest! {
        #[test]
        fn rules_are_idempotent_and_never_empty(seed in 0u64..500) {
            for s in toy::toy_corpus(8, seed) {
                for r in catalog() {
                    let once = r.rewrite(&s);
                    prop_assert!(!once.is_empty());
                    prop_assert_eq!(&r.rewrite(&once), &once);
                    if let Some(t) = &once.tags {
                        prop_assert_eq!(t.len(), once.len());
                    }
                }
            }
        }

        #[test]
        fn order_of_processing_does_not_matter(seed in 0u64..1000, n in 2usize..12) {
            let d = catalog_vector("D", &[0.5; 12]).unwrap();
            let sents = toy::toy_corpus(n, seed);
            let c = build_parallel_corpus(&sents, &d, seed).unwrap();
            for (i, s) in sents.iter().enumerate().rev() {
                let (out, applied) = transform_sentence(s, &d, seed, i as u64);
                prop_assert_eq!(&out, &c.pairs[i].dialect);
                prop_assert_eq!(&applied, &c.pairs[i].applied_rules);
            }
        }
    }
}
