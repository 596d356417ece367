//! Distance and coverage of a few source sets for Colloquial Singapore
//! English, then the best 4-subsets from a small candidate pool.

use hyperlora::typology::{builtin_ewave, coverage, select_sources, SourceSet};

fn main() -> hyperlora::Result<()> {
    let ew = builtin_ewave();
    let target = &ew["CollSgE"];
    println!("CollSgE attests {} rule-backed features", target.attested_count(Some(&hyperlora::typology::multivalue_rule_features())));

    for ids in [["AAVE", "IndE", "NgE", "ChcE"], ["MalaE", "MaltE", "JamE", "IndSAE"]] {
        let set = SourceSet::from_ids(&ew, &ids)?;
        println!("{:<28} l1 {:.3}  coverage {:.3}", ids.join(","), set.mean_normalized_l1(target)?, coverage(&set, target)?);
    }

    let pool: Vec<_> = ["AAVE", "IndE", "NgE", "ChcE", "JamE", "MalaE", "MaltE"].iter().map(|id| ew[*id].clone()).collect();
    for s in select_sources(&pool, target, 4)?.iter().take(5) {
        println!("rank {}  {:<24} l1 {:.3}  coverage {:.3}", s.pareto_rank, s.dialect_ids.join(","), s.l1, s.coverage);
    }
    Ok(())
}
