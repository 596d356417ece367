//! Generates adapters for two dialects from one hypernetwork and shows how
//! they move a sentence's token representations.

use hyperlora::encoder::{Encoder, EncoderConfig};
use hyperlora::hypernet::{generate_lora, param_count, HypernetConfig, HypernetWeights, InitScheme};
use hyperlora::transform::toy::toy_corpus;
use hyperlora::typology::builtin_ewave;

fn main() -> hyperlora::Result<()> {
    let ew = builtin_ewave();
    let enc = Encoder::toy(EncoderConfig::default())?;
    let cfg = HypernetConfig { init_scheme: InitScheme::SmallUniform, ..HypernetConfig::for_encoder(enc.config(), 236) };
    println!("hypernetwork parameters: {}", param_count(&cfg));
    let hw = HypernetWeights::init(&cfg, 0)?;

    let s = &toy_corpus(1, 9)[0];
    let plain = enc.encode(None, s)?;
    println!("sentence: {}", s.text());
    for id in ["AAVE", "CollSgE"] {
        let lora = generate_lora(&hw, &ew[id], &cfg)?;
        let norm: f64 = lora.blocks.iter().map(|b| b.dq.iter().chain(&b.uq).chain(&b.dv).chain(&b.uv).map(|v| v * v).sum::<f64>()).sum();
        let moved = enc.encode(Some(&lora), s)?;
        let shift = (&moved - &plain).mapv(f64::abs).fold(0.0f64, |m, v| m.max(*v));
        println!("{id:<8} adapter norm {:.4}  max token shift {shift:.2e}", norm.sqrt());
    }
    Ok(())
}
