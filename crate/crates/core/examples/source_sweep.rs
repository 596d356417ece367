//! Ranks 4-source subsets for CollSgE by typology, then trains the two
//! best subsets briefly and reports their zero-shot alignment.

use std::collections::BTreeMap;

use hyperlora::encoder::EncoderConfig;
use hyperlora::eval::{alignment_with, sweep_sources};
use hyperlora::ot::OTConfig;
use hyperlora::trainer::{precompute_sae, prepare_sources, train, zero_shot_adapt, Model, ToySetup, TrainConfig};
use hyperlora::typology::builtin_ewave;

fn main() -> hyperlora::Result<()> {
    let ew = builtin_ewave();
    let pool: BTreeMap<_, _> =
        ["AAVE", "IndE", "NgE", "ChcE", "JamE", "MalaE"].iter().map(|id| (id.to_string(), ew[*id].clone())).collect();
    let target = &ew["CollSgE"];
    let model = Model::toy(EncoderConfig::default(), 236, OTConfig::default())?;

    let rows = sweep_sources(&pool, target, 4, 2, &mut |ids| {
        let setup = ToySetup { sources: ids.to_vec(), sentences_per_dialect: 16, ..ToySetup::default() };
        let corpora = setup.source_corpora(&ew)?;
        let sae = precompute_sae(&corpora, &model.encoder, None)?;
        let sources = prepare_sources(&corpora, &ew, &sae, Some(&setup.target))?;
        let state = train(&model, &sources, &TrainConfig { epochs: 2, ..TrainConfig::default() }, &mut |_| Ok(()))?;
        let lora = zero_shot_adapt(&state, &model.hypernet, target)?;
        alignment_with(&model, &lora, &setup.target_corpus(&ew)?)
    })?;
    for r in &rows {
        print!("rank {} {:<24} l1 {:.3} coverage {:.3}", r.score.pareto_rank, r.score.dialect_ids.join(","), r.score.l1, r.score.coverage);
        match &r.scores {
            Some(s) => println!("  S_eps {:.4} -> {:.4}", s.s_eps_base, s.s_eps_adapted),
            None => println!(),
        }
    }
    Ok(())
}
