//! Analytic gradient of the alignment loss against central differences
//! for one batch of pseudo-NgE.

use hyperlora::encoder::{Encoder, EncoderConfig};
use hyperlora::grad::{central_difference, loss_and_grad, relative_error, Objective};
use hyperlora::hypernet::{HypernetConfig, HypernetWeights, InitScheme};
use hyperlora::ot::OTConfig;
use hyperlora::transform::{build_parallel_corpus, toy::toy_corpus};
use hyperlora::typology::builtin_ewave;

fn main() -> hyperlora::Result<()> {
    let ew = builtin_ewave();
    let d = &ew["NgE"];
    let enc = Encoder::toy(EncoderConfig::default())?;
    let hcfg = HypernetConfig { init_scheme: InitScheme::SmallUniform, ..HypernetConfig::for_encoder(enc.config(), d.len()) };
    let ot = OTConfig::default();
    let obj = Objective::new(&enc, &hcfg, &ot)?;
    let hw = HypernetWeights::init(&hcfg, 3)?;

    let corpus = build_parallel_corpus(&toy_corpus(16, 5), d, 5)?;
    let batch = corpus.dialect_sentences();
    let sae = enc.batch_encode(None, &corpus.sae_sentences())?;
    let report = loss_and_grad(&obj, &hw, d, &batch, &sae)?;
    let g = report.grads.to_flat();
    println!("loss {:.6}, {} parameters", report.loss, g.len());

    // The largest gradients, where the difference quotient is well above rounding noise.
    let mut order: Vec<usize> = (0..g.len()).collect();
    order.sort_by(|&i, &j| g[j].abs().total_cmp(&g[i].abs()));
    for &i in &order[..8] {
        let n = central_difference(&obj, &hw, d, &batch, &sae, i, 1e-4)?;
        let (tensor, _) = hw.locate(i).expect("index in range");
        println!("{tensor:<6} [{i:>5}]  analytic {:+.6e}  numeric {n:+.6e}  rel {:.1e}", g[i], relative_error(g[i], n));
    }
    Ok(())
}
