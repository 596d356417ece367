//! Acceptance gate. Runs every criterion in sequence, prints one PASS/FAIL
//! line each and exits non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use hyperlora::audit::capture_reads;
use hyperlora::encoder::{Encoder, EncoderConfig};
use hyperlora::eval::{eval_alignment, paired_bootstrap};
use hyperlora::grad::{central_difference, finite_diff_check, relative_error, Objective};
use hyperlora::hypernet::{generate_lora, HypernetConfig, HypernetWeights, InitScheme};
use hyperlora::ot::{exact_ot, sinkhorn_divergence, sinkhorn_w, OTConfig, PointCloud};
use hyperlora::trainer::{
    load_corpora, load_run, precompute_sae, prepare_sources, train, train_run, zero_shot_adapt, Model,
    ToySetup, TrainConfig,
};
use hyperlora::transform::toy::{toy_corpus, toy_sentence};
use hyperlora::transform::{build_parallel_corpus, catalog, catalog_vector, ParallelCorpus, TokenSentence};
use hyperlora::typology::{coverage, load_feature_vectors, FeatureVector, SourceSet};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:.1?}, limit {limit:?}"))
}

fn ewave_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/ewave_vectors.tsv")
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64) -> PointCloud {
    PointCloud::uniform(Array2::from_shape_fn((n, d), |(_, k)| {
        let z: f64 = StandardNormal.sample(rng);
        z + if k == 0 { shift } else { 0.0 }
    }))
    .unwrap()
}

// Typology tables: (sources, L1, coverage) against CollSgE.
const TABLE_ROWS: [([&str; 4], f64, f64); 11] = [
    (["MalaE", "MaltE", "JamE", "IndSAE"], 0.219, 0.878),
    (["CapeE", "FijiAE", "MaltE", "SriLE"], 0.209, 0.657),
    (["NgE", "AAVE", "IndE", "ChcE"], 0.257, 0.813),
    (["CapeE", "FijiAE", "FijiBE", "MalaE"], 0.228, 0.866),
    (["SriLE", "IndE", "AppE", "FijiAE"], 0.246, 0.675),
    (["JamE", "CapeE", "MaltE", "AbEng"], 0.231, 0.837),
    (["JamE", "FijiAE", "IndSAE", "AbEng"], 0.238, 0.844),
    (["SriLE", "AAVE", "MalaE", "AbEng"], 0.257, 0.871),
    (["SriLE", "IndE", "AppE", "IndSAE"], 0.253, 0.744),
    (["SriLE", "NgE", "AppE", "FijiBE"], 0.268, 0.777),
    (["AAVE", "JamE", "AppE", "FijiBE"], 0.287, 0.815),
];

fn typology_reproduction() -> Outcome {
    let t = Instant::now();
    let all = load_feature_vectors(ewave_path()).map_err(|e| e.to_string())?;
    let target = &all["CollSgE"];
    let mut worst: f64 = 0.0;
    for (ids, l1, cov) in TABLE_ROWS {
        let set = SourceSet::from_ids(&all, &ids).map_err(|e| e.to_string())?;
        let got_l1 = set.mean_normalized_l1(target).map_err(|e| e.to_string())?;
        let got_cov = coverage(&set, target).map_err(|e| e.to_string())?;
        let err = (got_l1 - l1).abs().max((got_cov - cov).abs());
        ensure(err <= 0.005, || format!("{ids:?}: L1 {got_l1:.4} vs {l1}, coverage {got_cov:.4} vs {cov}"))?;
        worst = worst.max(err);
    }
    within(t.elapsed(), Duration::from_secs(1))?;
    Ok(format!("{} rows, max deviation {worst:.4}, {:.0?}", TABLE_ROWS.len(), t.elapsed()))
}

fn sinkhorn_correctness() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // At this ε some instances need tens of thousands of iterations; the
    // default budget of 500 is sized for training.
    let cfg = OTConfig { max_iters: 100_000, ..OTConfig::with_epsilon(1e-3) };
    let mut worst_rel: f64 = 0.0;
    let mut converged = 0;
    for i in 0..50 {
        let (n, m) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let a = gaussian(&mut rng, n, 2, 0.0);
        let b = gaussian(&mut rng, m, 2, 0.5);
        let r = sinkhorn_w(&a, &b, &cfg).map_err(|e| e.to_string())?;
        converged += r.converged as usize;
        let w = r.value;
        let exact = exact_ot(&a, &b).map_err(|e| e.to_string())?;
        let rel = (w - exact).abs() / exact;
        ensure(rel <= 0.01, || format!("instance {i} ({n}x{m}): W_eps {w} vs exact {exact}"))?;
        worst_rel = worst_rel.max(rel);
    }
    let default = OTConfig::default();
    let mut worst_self: f64 = 0.0;
    let mut worst_sym: f64 = 0.0;
    for i in 0..100 {
        let (n, d) = (rng.random_range(1..=32), rng.random_range(1..=8));
        let a = gaussian(&mut rng, n, d, 0.0);
        let s = sinkhorn_divergence(&a, &a, &default).map_err(|e| e.to_string())?;
        ensure(s.abs() <= 1e-8, || format!("cloud {i}: S(a, a) = {s:e}"))?;
        worst_self = worst_self.max(s.abs());
        let m = rng.random_range(1..=32);
        let b = gaussian(&mut rng, m, d, 1.0);
        let ab = sinkhorn_divergence(&a, &b, &default).map_err(|e| e.to_string())?;
        let ba = sinkhorn_divergence(&b, &a, &default).map_err(|e| e.to_string())?;
        ensure((ab - ba).abs() <= 1e-10, || format!("cloud {i}: S(a, b) = {ab}, S(b, a) = {ba}"))?;
        worst_sym = worst_sym.max((ab - ba).abs());
    }
    within(t.elapsed(), Duration::from_secs(30))?;
    Ok(format!(
        "max rel gap {worst_rel:.2e} ({converged}/50 converged), max |S(a,a)| {worst_self:.1e}, max asymmetry {worst_sym:.1e}, {:.1?}",
        t.elapsed()
    ))
}

fn gradient_exactness() -> Outcome {
    let t = Instant::now();
    let ew = load_feature_vectors(ewave_path()).map_err(|e| e.to_string())?;
    let enc = Encoder::toy(EncoderConfig::default()).map_err(|e| e.to_string())?;
    let hcfg = HypernetConfig {
        init_scheme: InitScheme::SmallUniform,
        ..HypernetConfig::for_encoder(enc.config(), 236)
    };
    let ot = OTConfig::default();
    let obj = Objective::new(&enc, &hcfg, &ot).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (seed, id) in ["AAVE", "IndE", "NgE", "ChcE", "JamE"].iter().enumerate() {
        let seed = seed as u64;
        let d = &ew[*id];
        let corpus = build_parallel_corpus(&toy_corpus(16, 100 + seed), d, seed).map_err(|e| e.to_string())?;
        let sae = enc.batch_encode(None, &corpus.sae_sentences()).map_err(|e| e.to_string())?;
        let hw = HypernetWeights::init(&hcfg, seed).map_err(|e| e.to_string())?;
        let rep = finite_diff_check(&obj, &hw, d, &corpus.dialect_sentences(), &sae, 100, seed)
            .map_err(|e| e.to_string())?;
        let p = rep.probes.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)).unwrap();
        if rep.max_rel_error > 1e-4 {
            let wide = central_difference(&obj, &hw, d, &corpus.dialect_sentences(), &sae, p.index, 1e-4)
                .map_err(|e| e.to_string())?;
            return Err(format!(
                "seed {seed}: {} [{}] analytic {:e}, step 1e-6 gives {:e} (rel {:.1e}); step 1e-4 gives {wide:e} (rel {:.1e})",
                p.tensor,
                p.index,
                p.analytic,
                p.numeric,
                p.rel_error,
                relative_error(p.analytic, wide)
            ));
        }
        worst = worst.max(rep.max_rel_error);
    }
    within(t.elapsed(), Duration::from_secs(120))?;
    Ok(format!("500 probes, max rel error {worst:.2e}, {:.1?}", t.elapsed()))
}

fn identity_at_init() -> Outcome {
    let ew = load_feature_vectors(ewave_path()).map_err(|e| e.to_string())?;
    let enc = Encoder::toy(EncoderConfig::default()).map_err(|e| e.to_string())?;
    let hcfg = HypernetConfig::for_encoder(enc.config(), 236);
    ensure(hcfg.init_scheme == InitScheme::ZeroOutput, || "default init is not ZeroOutput".into())?;
    let hw = HypernetWeights::init(&hcfg, 7).map_err(|e| e.to_string())?;
    let lora = generate_lora(&hw, &ew["AAVE"], &hcfg).map_err(|e| e.to_string())?;
    ensure(!lora.is_zero(), || "down projections should be non-zero".into())?;
    let sentences = toy_corpus(1000, 11);
    for (i, s) in sentences.iter().enumerate() {
        let base = enc.encode(None, s).map_err(|e| e.to_string())?;
        let adapted = enc.encode(Some(&lora), s).map_err(|e| e.to_string())?;
        let same = base.shape() == adapted.shape()
            && base.iter().zip(adapted.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
        ensure(same, || format!("sentence {i} differs: {s}"))?;
    }
    Ok(format!("{} sentences bit-identical", sentences.len()))
}

/// Two-sided 99% acceptance region of Binomial(n, p) for the count, from
/// the exact probability mass function.
fn binomial_region(n: u64, p: f64) -> (u64, u64) {
    if p >= 1.0 {
        return (n, n);
    }
    let ln_fact: Vec<f64> = std::iter::once(0.0)
        .chain((1..=n).scan(0.0, |acc, k| {
            *acc += (k as f64).ln();
            Some(*acc)
        }))
        .collect();
    let pmf: Vec<f64> = (0..=n)
        .map(|k| {
            let k_ = k as usize;
            (ln_fact[n as usize] - ln_fact[k_] - ln_fact[(n - k) as usize]
                + k as f64 * p.ln()
                + (n - k) as f64 * (1.0 - p).ln())
            .exp()
        })
        .collect();
    let mut lo = 0;
    let mut acc = 0.0;
    while acc + pmf[lo as usize] <= 0.005 {
        acc += pmf[lo as usize];
        lo += 1;
    }
    let mut hi = n;
    let mut acc = 0.0;
    while acc + pmf[hi as usize] <= 0.005 {
        acc += pmf[hi as usize];
        hi -= 1;
    }
    (lo, hi)
}

fn applicable_sentences(rule: usize, n: usize, seed: u64) -> Result<Vec<TokenSentence>, String> {
    let r = &catalog()[rule];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..2_000_000 {
        let s = toy_sentence(&mut rng);
        if r.applicable(&s) {
            out.push(s);
            if out.len() == n {
                return Ok(out);
            }
        }
    }
    Err(format!("rule {} matched only {} toy sentences", r.id, out.len()))
}

fn transform_rate_fidelity() -> Outcome {
    const N: usize = 10_000;
    let rules = catalog();
    let mut cells = 0;
    let mut worst_z: f64 = 0.0;
    for (k, rule) in rules.iter().enumerate() {
        let sentences = applicable_sentences(k, N, 1000 + k as u64)?;
        for rate in [0.3, 0.6, 1.0] {
            let mut rates = vec![0.0; rules.len()];
            rates[k] = rate;
            let d = catalog_vector("R", &rates).map_err(|e| e.to_string())?;
            let seed = 7 + k as u64;
            let corpus = build_parallel_corpus(&sentences, &d, seed).map_err(|e| e.to_string())?;
            let fired = corpus.pairs.iter().filter(|p| p.applied_rules.contains(rule.id)).count() as u64;
            let (lo, hi) = binomial_region(N as u64, rate);
            ensure((lo..=hi).contains(&fired), || {
                format!("rule {} at {rate}: fired {fired}/{N}, 99% region [{lo}, {hi}]", rule.id)
            })?;
            let again = build_parallel_corpus(&sentences, &d, seed).map_err(|e| e.to_string())?;
            ensure(again.to_tsv() == corpus.to_tsv(), || format!("rule {} at {rate}: rerun differs", rule.id))?;
            if rate < 1.0 {
                let sd = (N as f64 * rate * (1.0 - rate)).sqrt();
                worst_z = worst_z.max((fired as f64 - N as f64 * rate).abs() / sd);
            }
            cells += 1;
        }
    }
    Ok(format!("{cells} rule/rate cells inside the 99% region, max |z| {worst_z:.2}, reruns identical"))
}

fn train_toy(setup: &ToySetup, ew: &BTreeMap<String, FeatureVector>) -> Result<(Model, hyperlora::trainer::TrainState), String> {
    let model = Model::toy(EncoderConfig::default(), 236, OTConfig::default()).map_err(|e| e.to_string())?;
    let corpora = setup.source_corpora(ew).map_err(|e| e.to_string())?;
    let sae = precompute_sae(&corpora, &model.encoder, None).map_err(|e| e.to_string())?;
    let sources = prepare_sources(&corpora, ew, &sae, Some(&setup.target)).map_err(|e| e.to_string())?;
    let state = train(&model, &sources, &TrainConfig::default(), &mut |_| Ok(())).map_err(|e| e.to_string())?;
    Ok((model, state))
}

fn training_smoke() -> Outcome {
    let t = Instant::now();
    let ew = load_feature_vectors(ewave_path()).map_err(|e| e.to_string())?;
    let setup = ToySetup::default();
    let (model, state) = train_toy(&setup, &ew)?;
    let first = state.epoch_losses[0];
    let drop = 1.0 - state.best_loss / first;
    let target = setup.target_corpus(&ew).map_err(|e| e.to_string())?;
    let s = eval_alignment(&model, &state, &ew[&setup.target], &target).map_err(|e| e.to_string())?;
    let summary = format!(
        "epoch 1 loss {first:.4}, best {:.4} (epoch {}), drop {:.1}%; held-out {} S_eps base {:.4}, adapted {:.4}; {:.0?}",
        state.best_loss,
        state.best_epoch.map_or(0, |e| e + 1),
        100.0 * drop,
        setup.target,
        s.s_eps_base,
        s.s_eps_adapted,
        t.elapsed()
    );
    ensure(drop >= 0.5, || format!("loss drop below 50%: {summary}"))?;
    ensure(s.s_eps_adapted < s.s_eps_base, || format!("adapter does not help the held-out dialect: {summary}"))?;
    within(t.elapsed(), Duration::from_secs(600))?;
    Ok(summary)
}

/// Resampling written against per-item multiplicities: each resample tallies
/// how often every item was drawn, then compares the two weighted means.
fn reference_bootstrap(a: &[f64], b: &[f64], n: usize, seed: u64) -> f64 {
    let m = a.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0u32; m];
    let mut not_better = 0;
    for _ in 0..n {
        counts.iter_mut().for_each(|c| *c = 0);
        for _ in 0..m {
            counts[rng.random_range(0..m)] += 1;
        }
        let total_a: f64 = counts.iter().zip(a).map(|(&c, &x)| c as f64 * x).sum();
        let total_b: f64 = counts.iter().zip(b).map(|(&c, &x)| c as f64 * x).sum();
        if total_a <= total_b {
            not_better += 1;
        }
    }
    not_better as f64 / n as f64
}

fn bootstrap_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for case in 0..20u64 {
        let m = rng.random_range(20..=200);
        let effect = rng.random_range(-0.2..0.4);
        let (a, b): (Vec<f64>, Vec<f64>) = if case % 2 == 0 {
            (0..m)
                .map(|_| {
                    let base: f64 = StandardNormal.sample(&mut rng);
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    (base + effect + 0.5 * noise, base)
                })
                .unzip()
        } else {
            (0..m)
                .map(|_| {
                    let pb = rng.random_bool(0.7);
                    let pa = if rng.random_bool(0.3) { rng.random_bool((0.7 + effect).clamp(0.0, 1.0)) } else { pb };
                    (pa as u8 as f64, pb as u8 as f64)
                })
                .unzip()
        };
        let got = paired_bootstrap(&a, &b, 0.05, 10_000, case).map_err(|e| e.to_string())?;
        let want = reference_bootstrap(&a, &b, 10_000, case);
        let gap = (got.p_value - want).abs();
        ensure(gap <= 0.01, || format!("case {case}: p {} vs reference {want}", got.p_value))?;
        worst = worst.max(gap);
    }
    Ok(format!("20 cases, max p-value gap {worst:.4}"))
}

fn mentions(path: &Path, id: &str) -> bool {
    path.to_string_lossy().contains(id)
}

fn zero_shot_purity() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let (corpora_dir, heldout_dir, run_dir, cache_dir) =
        (root.join("corpora"), root.join("heldout"), root.join("run"), root.join("cache"));
    for d in [&corpora_dir, &heldout_dir] {
        std::fs::create_dir_all(d).map_err(|e| e.to_string())?;
    }
    let ew = load_feature_vectors(ewave_path()).map_err(|e| e.to_string())?;
    let setup = ToySetup { sentences_per_dialect: 24, eval_sentences: 16, ..ToySetup::default() };
    let target_id = setup.target.clone();
    for (id, c) in setup.source_corpora(&ew).map_err(|e| e.to_string())? {
        c.write(corpora_dir.join(format!("{id}.tsv"))).map_err(|e| e.to_string())?;
    }
    let target = setup.target_corpus(&ew).map_err(|e| e.to_string())?;
    // A decoy copy of the target corpus sits next to the training corpora.
    target.write(corpora_dir.join(format!("{target_id}.tsv"))).map_err(|e| e.to_string())?;
    let heldout = heldout_dir.join(format!("{target_id}.tsv"));
    target.write(&heldout).map_err(|e| e.to_string())?;

    let (trained, train_reads) = capture_reads(|| -> hyperlora::Result<()> {
        let features = load_feature_vectors(ewave_path())?;
        let model = Model::toy(EncoderConfig::default(), 236, OTConfig::default())?;
        let corpora = load_corpora(&corpora_dir, Some(&target_id))?;
        // The first call fills the cache, the second reads it back.
        precompute_sae(&corpora, &model.encoder, Some(&cache_dir))?;
        let sae = precompute_sae(&corpora, &model.encoder, Some(&cache_dir))?;
        let sources = prepare_sources(&corpora, &features, &sae, Some(&target_id))?;
        let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
        train_run(&model, &sources, &cfg, Some(&target_id), &run_dir, &mut |_| {})?;
        Ok(())
    });
    trained.map_err(|e| e.to_string())?;
    let leaked: Vec<&PathBuf> = train_reads.iter().filter(|p| mentions(p, &target_id)).collect();
    ensure(leaked.is_empty(), || format!("training read {leaked:?}"))?;
    ensure(train_reads.iter().any(|p| p.starts_with(&cache_dir)), || "SAE cache was not reread".into())?;

    let (adapter, adapt_reads) = capture_reads(|| -> hyperlora::Result<_> {
        let run = load_run(&run_dir)?;
        let features = load_feature_vectors(ewave_path())?;
        let state = run.state();
        let (lora, inner) = capture_reads(|| zero_shot_adapt(&state, &run.model.hypernet, &features[&target_id]));
        Ok((run, features, state, lora?, inner))
    });
    let (run, features, state, _lora, inner) = adapter.map_err(|e| e.to_string())?;
    ensure(inner.is_empty(), || format!("zero_shot_adapt read {inner:?}"))?;
    let leaked: Vec<&PathBuf> = adapt_reads.iter().filter(|p| mentions(p, &target_id)).collect();
    ensure(leaked.is_empty(), || format!("adapter generation read {leaked:?}"))?;

    let (scores, eval_reads) = capture_reads(|| -> hyperlora::Result<_> {
        let corpus = ParallelCorpus::read(&heldout)?;
        eval_alignment(&run.model, &state, &features[&target_id], &corpus)
    });
    scores.map_err(|e| e.to_string())?;
    ensure(eval_reads == vec![heldout.clone()], || format!("evaluation read {eval_reads:?}"))?;

    let all: BTreeSet<&PathBuf> = train_reads.iter().chain(&adapt_reads).chain(&eval_reads).collect();
    let decoy = corpora_dir.join(format!("{target_id}.tsv"));
    ensure(!all.contains(&decoy), || "the decoy target corpus was opened".into())?;
    let target_files: Vec<&&PathBuf> = all.iter().filter(|p| mentions(p, &target_id)).collect();
    Ok(format!(
        "{} distinct files read; only {target_id} file: {}",
        all.len(),
        target_files.iter().map(|p| p.strip_prefix(root).unwrap_or(p).display().to_string()).collect::<Vec<_>>().join(", ")
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("typology reproduction", typology_reproduction),
        ("sinkhorn correctness", sinkhorn_correctness),
        ("gradient exactness", gradient_exactness),
        ("identity at initialization", identity_at_init),
        ("transform rate fidelity", transform_rate_fidelity),
        ("training smoke", training_smoke),
        ("bootstrap oracle equivalence", bootstrap_equivalence),
        ("zero-shot purity", zero_shot_purity),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {}: {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {}: {name}: {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
