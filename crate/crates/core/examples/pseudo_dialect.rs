//! Rewrites a handful of toy sentences into pseudo-AAVE and prints which
//! rules fired.

use hyperlora::transform::{build_parallel_corpus, corpus_stats, toy::toy_corpus, transform_sentence};
use hyperlora::typology::builtin_ewave;

fn main() -> hyperlora::Result<()> {
    let ew = builtin_ewave();
    let aave = &ew["AAVE"];
    let sentences = toy_corpus(6, 1);
    for (i, s) in sentences.iter().enumerate() {
        let (out, applied) = transform_sentence(s, aave, 42, i as u64);
        println!("{}\n  -> {}   [{}]", s.text(), out.text(), applied.into_iter().collect::<Vec<_>>().join(" "));
    }

    let corpus = build_parallel_corpus(&toy_corpus(500, 2), aave, 42)?;
    let stats = corpus_stats(&corpus);
    println!("\n{stats:?}");
    println!("corpus hash {}", corpus.content_hash());
    Ok(())
}
