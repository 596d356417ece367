use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use hyperlora::encoder::EncoderConfig;
use hyperlora::eval::{self, paired_bootstrap, EvalReport, RunInfo, DEFAULT_RESAMPLES, SWEEP_TSV_HEADER};
use hyperlora::ot::{self, OTConfig, PointCloud};
use hyperlora::trainer::{self, Event, Model, ToySetup, TrainConfig};
use hyperlora::transform::{self, toy::toy_corpus, ParallelCorpus};
use hyperlora::typology::{self, FeatureVector, SourceSet};
use hyperlora::{Error, Result};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Precision {
    F64,
}

#[derive(Parser)]
#[command(name = "hyperlora", version, about = "Hypernetwork-generated dialect adapters")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, value_enum, default_value = "f64")]
    precision: Precision,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Typological distances and coverage.
    #[command(subcommand)]
    Typology(TypologyCmd),
    /// Writes a parallel SAE / pseudo-dialect corpus.
    Transform {
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        dialect: String,
        /// Corpus of SAE sentences; omit to use `--toy` generated ones.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        toy: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Entropic and exact transport between two point clouds.
    Ot {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        epsilon: f64,
        #[arg(long, default_value_t = 500)]
        max_iters: usize,
    },
    /// Trains the hypernetwork on every corpus in a directory but the excluded one.
    Train {
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        corpora: PathBuf,
        #[arg(long)]
        exclude: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: TrainOpts,
    },
    /// Zero-shot evaluation of a trained run on a held-out corpus.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        target: String,
        #[arg(long)]
        corpus: PathBuf,
        /// Writes the TSV report here as well as printing the summary.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
        resamples: usize,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
    /// Ranks source subsets for a target; trains and evaluates the top `budget`.
    Sweep {
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        target: String,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        budget: usize,
        /// Candidate dialects; all but the target when omitted.
        #[arg(long, value_delimiter = ',')]
        candidates: Vec<String>,
        /// Rows to print.
        #[arg(long, default_value_t = 20)]
        top: usize,
        #[command(flatten)]
        opts: TrainOpts,
    },
    /// One-sided paired bootstrap on two score files (one number per line).
    Bootstrap {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
        n: usize,
    },
}

#[derive(Subcommand)]
enum TypologyCmd {
    /// Mean normalized L1 distance and coverage of a source set.
    Coverage {
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        target: String,
        #[arg(long, value_delimiter = ',', required = true)]
        sources: Vec<String>,
    },
}

#[derive(clap::Args)]
struct TrainOpts {
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 3e-5)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    /// Toy sentences per dialect (sweep only).
    #[arg(long, default_value_t = 256)]
    sentences: usize,
    /// Print the running loss every this many steps.
    #[arg(long, default_value_t = 0)]
    eval_every: usize,
}

impl TrainOpts {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
            eval_every: self.eval_every,
            ..TrainConfig::default()
        }
    }
}

fn features(path: &Option<PathBuf>) -> Result<BTreeMap<String, FeatureVector>> {
    match path {
        Some(p) => typology::load_feature_vectors(p),
        None => Ok(typology::builtin_ewave()),
    }
}

fn lookup<'a>(fs: &'a BTreeMap<String, FeatureVector>, id: &str) -> Result<&'a FeatureVector> {
    fs.get(id).ok_or_else(|| Error::Argument(format!("unknown dialect {id}")))
}

fn log_event(ev: &Event) {
    match ev {
        Event::Progress { step, epoch, running_mean } => eprintln!("step {step} (epoch {epoch}): running loss {running_mean:.5}"),
        Event::Epoch { epoch, mean_loss, improved, .. } => {
            eprintln!("epoch {epoch}: mean loss {mean_loss:.5}{}", if *improved { " (best)" } else { "" })
        }
        Event::Step(_) => {}
    }
}

fn default_model(feature_dim: usize) -> Result<Model> {
    Model::toy(EncoderConfig::default(), feature_dim, OTConfig::default())
}

fn run(cli: Cli) -> Result<()> {
    let Precision::F64 = cli.precision;
    let seed = cli.seed;
    match cli.cmd {
        Cmd::Typology(TypologyCmd::Coverage { features: f, target, sources }) => {
            let fs = features(&f)?;
            let set = SourceSet::from_ids(&fs, &sources)?;
            let t = lookup(&fs, &target)?;
            println!("sources\t{}", sources.join(","));
            println!("target\t{target}");
            println!("l1\t{:.3}", set.mean_normalized_l1(t)?);
            println!("coverage\t{:.3}", typology::coverage(&set, t)?);
        }
        Cmd::Transform { features: f, dialect, input, toy, out } => {
            let fs = features(&f)?;
            let sents = match input {
                Some(p) => transform::read_corpus(p)?,
                None => toy_corpus(toy, seed),
            };
            let corpus = transform::build_parallel_corpus(&sents, lookup(&fs, &dialect)?, seed)?;
            corpus.write(&out)?;
            let st = transform::corpus_stats(&corpus);
            eprintln!(
                "{} pairs, {:.1}% transformed, {} features applied",
                corpus.len(),
                st.pct_transformed,
                st.applied_feature_count
            );
        }
        Cmd::Ot { a, b, epsilon, max_iters } => {
            let (a, b) = (PointCloud::read(a)?, PointCloud::read(b)?);
            let cfg = OTConfig { max_iters, ..OTConfig::with_epsilon(epsilon) };
            let r = ot::sinkhorn_w(&a, &b, &cfg)?;
            println!("w_eps\t{:?}", r.value);
            println!("iterations\t{}", r.iterations);
            println!("converged\t{}", r.converged);
            println!("marginal_error\t{:e}", r.marginal_error);
            println!("s_eps\t{:?}", ot::sinkhorn_divergence(&a, &b, &cfg)?);
            if a.len() * b.len() <= ot::EXACT_OT_MAX_CELLS {
                println!("exact\t{:?}", ot::exact_ot(&a, &b)?);
            }
        }
        Cmd::Train { features: f, corpora, exclude, out, opts } => {
            let fs = features(&f)?;
            let corpora = trainer::load_corpora(&corpora, Some(&exclude))?;
            let model = default_model(lookup(&fs, &exclude)?.len())?;
            let sae = trainer::precompute_sae(&corpora, &model.encoder, Some(&out.join("sae_cache")))?;
            let sources = trainer::prepare_sources(&corpora, &fs, &sae, Some(&exclude))?;
            let st = trainer::train_run(&model, &sources, &opts.config(seed), Some(&exclude), &out, &mut log_event)?;
            println!("best epoch mean loss {:.5}; run written to {}", st.best_loss, out.display());
        }
        Cmd::Eval { run, features: f, target, corpus, out, resamples, alpha } => {
            let report = eval_command(&run, &f, &target, &corpus, resamples, alpha, seed)?;
            print!("{}", report.to_text());
            if let Some(p) = out {
                std::fs::write(&p, report.to_tsv()).map_err(|e| Error::Argument(format!("{}: {e}", p.display())))?;
            }
        }
        Cmd::Sweep { features: f, target, k, budget, candidates, top, opts } => {
            let fs = features(&f)?;
            let t = lookup(&fs, &target)?.clone();
            let pool: BTreeMap<String, FeatureVector> = if candidates.is_empty() {
                fs.clone()
            } else {
                candidates.iter().map(|c| Ok((c.clone(), lookup(&fs, c)?.clone()))).collect::<Result<_>>()?
            };
            let cfg = opts.config(seed);
            let rows = eval::sweep_sources(&pool, &t, k, budget, &mut |ids| {
                let setup = ToySetup {
                    sources: ids.to_vec(),
                    target: target.clone(),
                    sentences_per_dialect: opts.sentences,
                    seed,
                    ..ToySetup::default()
                };
                let model = default_model(t.len())?;
                let corpora = setup.source_corpora(&fs)?;
                let sae = trainer::precompute_sae(&corpora, &model.encoder, None)?;
                let sources = trainer::prepare_sources(&corpora, &fs, &sae, Some(&target))?;
                let st = trainer::train(&model, &sources, &cfg, &mut |ev| {
                    log_event(&ev);
                    Ok(())
                })?;
                eval::eval_alignment(&model, &st, &t, &setup.target_corpus(&fs)?)
            })?;
            println!("{SWEEP_TSV_HEADER}");
            for r in rows.iter().take(top.max(budget)) {
                println!("{}", r.tsv_line());
            }
        }
        Cmd::Bootstrap { a, b, alpha, n } => {
            let r = paired_bootstrap(&read_scores(&a)?, &read_scores(&b)?, alpha, n, seed)?;
            println!("observed_delta\t{:?}", r.observed_delta);
            println!("p_value\t{:?}", r.p_value);
            println!("n_resamples\t{}", r.n_resamples);
            println!("alpha\t{:?}", r.alpha);
            println!("significant\t{}", r.significant);
        }
    }
    Ok(())
}

fn read_scores(p: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(p).map_err(|e| Error::Argument(format!("{}: {e}", p.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.trim().parse().map_err(|_| Error::Parse {
                path: p.display().to_string(),
                line: n + 1,
                msg: format!("not a number: {l}"),
            })
        })
        .collect()
}

fn eval_command(
    run: &Path,
    f: &Option<PathBuf>,
    target: &str,
    corpus_path: &Path,
    resamples: usize,
    alpha: f64,
    seed: u64,
) -> Result<EvalReport> {
    let fs = features(f)?;
    let loaded = trainer::load_run(run)?;
    if loaded.meta.sources.iter().any(|s| s == target) {
        return Err(Error::Argument(format!("{target} was a training source of {}", run.display())));
    }
    let corpus = ParallelCorpus::read(corpus_path)?;
    let t = lookup(&fs, target)?;
    let state = loaded.state();
    let rec = eval::evaluate(&loaded.model, &state, t, &corpus, seed)?;
    let probe = eval::eval_probe(&loaded.model, &state, t, &corpus, seed)?;
    let score = |c: &[bool]| c.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    let boot = paired_bootstrap(&score(&probe.correct_adapted), &score(&probe.correct_base), alpha, resamples, seed)?;
    let mut info = RunInfo {
        command: format!(
            "hyperlora eval --run {} --target {target} --corpus {} --resamples {resamples} --alpha {alpha} --seed {seed}{}",
            run.display(),
            corpus_path.display(),
            f.as_ref().map(|p| format!(" --features {}", p.display())).unwrap_or_default()
        ),
        ..RunInfo::default()
    };
    info.seeds.insert("probe".into(), seed);
    info.seeds.insert("train".into(), loaded.meta.train.seed);
    info.seeds.insert("encoder".into(), loaded.meta.encoder.seed);
    info.configs.insert("ot".into(), json(&loaded.meta.ot));
    info.configs.insert("encoder".into(), json(&loaded.meta.encoder));
    info.configs.insert("hypernet".into(), json(&loaded.meta.hypernet));
    info.configs.insert("train".into(), json(&loaded.meta.train));
    info.corpus_hashes = loaded.meta.corpus_hashes.clone();
    info.corpus_hashes.insert(target.to_string(), corpus.content_hash());
    Ok(EvalReport { info, records: vec![rec], bootstrap: Some(boot) })
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("configuration serializes")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
