//! Full evaluation record of a held-out dialect: alignment, probe accuracy
//! and a paired bootstrap over per-sentence probe correctness.

use hyperlora::encoder::EncoderConfig;
use hyperlora::eval::{eval_probe, evaluate, paired_bootstrap, EvalReport, RunInfo};
use hyperlora::ot::OTConfig;
use hyperlora::trainer::{precompute_sae, prepare_sources, train, Model, ToySetup, TrainConfig};
use hyperlora::typology::builtin_ewave;

fn main() -> hyperlora::Result<()> {
    let ew = builtin_ewave();
    let setup = ToySetup { sentences_per_dialect: 32, ..ToySetup::default() };
    let model = Model::toy(EncoderConfig::default(), 236, OTConfig::default())?;
    let corpora = setup.source_corpora(&ew)?;
    let sae = precompute_sae(&corpora, &model.encoder, None)?;
    let sources = prepare_sources(&corpora, &ew, &sae, Some(&setup.target))?;
    let state = train(&model, &sources, &TrainConfig { epochs: 3, ..TrainConfig::default() }, &mut |_| Ok(()))?;

    let target = &ew[&setup.target];
    let corpus = setup.target_corpus(&ew)?;
    let record = evaluate(&model, &state, target, &corpus, 7)?;

    let p = eval_probe(&model, &state, target, &corpus, 7)?;
    let as_f64 = |c: &[bool]| c.iter().map(|&x| x as u8 as f64).collect::<Vec<_>>();
    let b = paired_bootstrap(&as_f64(&p.correct_adapted), &as_f64(&p.correct_base), 0.05, 10_000, 0)?;

    let info = RunInfo { command: "cargo run --release --example zero_shot_eval".into(), ..RunInfo::default() };
    let report = EvalReport { info, records: vec![record], bootstrap: Some(b) };
    print!("{}\n{}", report.to_text(), report.to_tsv());
    Ok(())
}
