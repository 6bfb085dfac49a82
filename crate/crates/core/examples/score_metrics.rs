//! Corpus chrF++ and BLEU-4 on a handful of sentences.

use peswap::metrics::{bleu, chrfpp, format_score, word_tokens, ChrFConfig};

fn main() -> peswap::Result<()> {
    let refs = [
        "The cat sat on the mat.",
        "It was raining, so we stayed home.",
        "Positional information matters.",
    ];
    let systems = [
        ("identical", refs.to_vec()),
        ("close", vec!["The cat sat on a mat.", "It rained, so we stayed at home.", "Position information matters."]),
        ("unrelated", vec!["Bananas are yellow.", "Quantum foam.", "Zzz."]),
    ];
    println!("tokens of `{}`: {:?}\n", refs[1], word_tokens(refs[1]));
    for (name, hyps) in systems {
        println!("{name}");
        println!("  {}", format_score("chrfpp", chrfpp(&hyps, &refs, &ChrFConfig::default())?));
        println!("  {}", format_score("bleu", bleu(&hyps, &refs)?));
    }
    Ok(())
}
