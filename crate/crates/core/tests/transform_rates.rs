//! Firing rates and corpus statistics of the rewrite pipeline.

use std::collections::BTreeSet;

use hyperlora::transform::toy::{toy_corpus, toy_sentence};
use hyperlora::transform::{build_parallel_corpus, catalog, catalog_vector, corpus_stats, ParallelCorpus, TokenSentence};
use hyperlora::typology::builtin_ewave;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn applicable(rule: usize, n: usize, seed: u64) -> Vec<TokenSentence> {
    let r = &catalog()[rule];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::iter::repeat_with(|| toy_sentence(&mut rng)).filter(|s| r.applicable(s)).take(n).collect()
}

fn only(rule: usize, rate: f64) -> hyperlora::typology::FeatureVector {
    let mut rates = vec![0.0; catalog().len()];
    rates[rule] = rate;
    catalog_vector("R", &rates).unwrap()
}

fn fired(c: &ParallelCorpus, id: &str) -> usize {
    c.pairs.iter().filter(|p| p.applied_rules.contains(id)).count()
}

#[test]
fn rate_point_six_fires_on_about_sixty_percent() {
    let k = catalog().iter().position(|r| r.id == "72").unwrap();
    let sents = applicable(k, 10_000, 3);
    let c = build_parallel_corpus(&sents, &only(k, 0.6), 42).unwrap();
    let frac = fired(&c, "72") as f64 / 10_000.0;
    assert!((0.58..=0.62).contains(&frac), "{frac}");
}

#[test]
fn obligatory_rules_always_fire_and_absent_ones_never_do() {
    for (k, r) in catalog().iter().enumerate() {
        let sents = applicable(k, 300, 50 + k as u64);
        assert_eq!(fired(&build_parallel_corpus(&sents, &only(k, 1.0), 1).unwrap(), r.id), 300, "{}", r.id);
        let c = build_parallel_corpus(&sents, &only(k, 0.0), 1).unwrap();
        assert!(c.pairs.iter().all(|p| p.applied_rules.is_empty() && p.sae == p.dialect), "{}", r.id);
    }
}

/// Summed squared z-scores over every rule at two fractional rates should
/// look like a chi-square draw with that many degrees of freedom.
#[test]
fn firing_counts_are_calibrated_across_the_catalog() {
    const N: usize = 4000;
    let mut chi2 = 0.0;
    let mut dof = 0;
    for (k, r) in catalog().iter().enumerate() {
        let sents = applicable(k, N, 900 + k as u64);
        for rate in [0.3, 0.6] {
            let f = fired(&build_parallel_corpus(&sents, &only(k, rate), 77).unwrap(), r.id) as f64;
            let mean = N as f64 * rate;
            chi2 += (f - mean).powi(2) / (mean * (1.0 - rate));
            dof += 1;
        }
    }
    assert_eq!(dof, 24);
    // 0.5% and 99.5% quantiles of chi-square with 24 degrees of freedom.
    assert!((9.886..=45.559).contains(&chi2), "chi2 = {chi2}");
}

#[test]
fn stats_match_a_text_level_recount() {
    let ew = builtin_ewave();
    let c = build_parallel_corpus(&toy_corpus(1000, 8), &ew["CollSgE"], 8).unwrap();
    let st = corpus_stats(&c);
    let changed = c.pairs.iter().filter(|p| p.sae.to_string() != p.dialect.to_string()).count();
    assert_eq!(st.pct_transformed, 100.0 * changed as f64 / 1000.0);
    let mut ids = BTreeSet::new();
    for p in &c.pairs {
        ids.extend(p.applied_rules.iter().cloned());
    }
    assert_eq!(st.applied_feature_count, ids.len());
    assert!(st.pct_transformed > 0.0 && st.pct_transformed < 100.0, "{st:?}");
    let identity = build_parallel_corpus(&toy_corpus(50, 8), &only(0, 0.0), 8).unwrap();
    assert_eq!(corpus_stats(&identity).pct_transformed, 0.0);
    assert_eq!(corpus_stats(&identity).applied_feature_count, 0);
}

#[test]
fn corpora_are_reproducible_and_seed_sensitive() {
    let ew = builtin_ewave();
    let sents = toy_corpus(500, 1);
    let a = build_parallel_corpus(&sents, &ew["AAVE"], 5).unwrap();
    let b = build_parallel_corpus(&sents, &ew["AAVE"], 5).unwrap();
    assert_eq!(a.to_tsv(), b.to_tsv());
    assert_eq!(a.content_hash(), b.content_hash());
    let c = build_parallel_corpus(&sents, &ew["AAVE"], 6).unwrap();
    assert_ne!(a.to_tsv(), c.to_tsv());
    // Pair order follows input order.
    assert!(a.pairs.iter().zip(&sents).all(|(p, s)| &p.sae == s));
}
