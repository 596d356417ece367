//! A short hypernetwork training run on the toy setup (four source
//! dialects), then a zero-shot adapter for the held-out CollSgE.
//!
//! `cargo run --release --example train_toy -- 10` sets the epoch count.

use hyperlora::encoder::EncoderConfig;
use hyperlora::eval::eval_alignment;
use hyperlora::ot::OTConfig;
use hyperlora::trainer::{precompute_sae, prepare_sources, train, Event, Model, ToySetup, TrainConfig};
use hyperlora::typology::builtin_ewave;

fn main() -> hyperlora::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let ew = builtin_ewave();
    let setup = ToySetup { sentences_per_dialect: 64, ..ToySetup::default() };
    let model = Model::toy(EncoderConfig::default(), 236, OTConfig::default())?;
    let corpora = setup.source_corpora(&ew)?;
    let sae = precompute_sae(&corpora, &model.encoder, None)?;
    let sources = prepare_sources(&corpora, &ew, &sae, Some(&setup.target))?;

    let cfg = TrainConfig { epochs, ..TrainConfig::default() };
    let state = train(&model, &sources, &cfg, &mut |e| {
        if let Event::Epoch { epoch, mean_loss, improved, .. } = e {
            println!("epoch {epoch:>3}  loss {mean_loss:.4}{}", if improved { "  *" } else { "" });
        }
        Ok(())
    })?;

    let target = setup.target_corpus(&ew)?;
    let s = eval_alignment(&model, &state, &ew[&setup.target], &target)?;
    println!("{}: S_eps base {:.4}, adapted {:.4}", setup.target, s.s_eps_base, s.s_eps_adapted);
    Ok(())
}
