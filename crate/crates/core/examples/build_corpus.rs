//! Document-level corpus construction: sliding-window grouping of sentence
//! pairs that share url, domain and topic; conversation merging; and top-k
//! selection by score.

use peswap::corpus::{build_flores_docs, merge_conversations, select_top_k, ParallelPair, FLORES_GROUP_KEYS};
use peswap::numerics::RngStream;

fn main() -> peswap::Result<()> {
    let article = |url: &str, i: usize| {
        ParallelPair::new(format!("{url}-{i}"), format!("source {i}"), format!("target {i}"))
            .with_meta("url", url)
            .with_meta("domain", "news")
            .with_meta("topic", "science")
    };
    let mut pairs: Vec<ParallelPair> = (0..5).map(|i| article("a", i)).chain((0..2).map(|i| article("b", i))).collect();
    pairs.push(ParallelPair::new("orphan", "no", "metadata"));

    let (docs, rejected) = build_flores_docs(&pairs, &FLORES_GROUP_KEYS, 3)?;
    println!("{} documents from {} pairs", docs.len(), pairs.len());
    for d in &docs {
        println!("  [{}] {} | {}", d.provenance.join(","), d.src_doc, d.tgt_doc);
    }
    for r in &rejected {
        println!("  rejected {} (no {})", r.id, r.missing_key);
    }

    let turns = [("c1", 1, "how are you"), ("c2", 0, "hello"), ("c1", 0, "hi"), ("c2", 1, "bye")];
    let chat: Vec<ParallelPair> = turns
        .iter()
        .enumerate()
        .map(|(i, (c, t, s))| {
            ParallelPair::new(i.to_string(), *s, s.to_uppercase())
                .with_meta("conversation_id", *c)
                .with_meta("turn_index", t.to_string())
        })
        .collect();
    println!("\nconversations:");
    for d in merge_conversations(&chat)? {
        println!("  {} turns: {}", d.n_sentences, d.src_doc);
    }

    let scored: Vec<ParallelPair> = (0..6)
        .map(|i| {
            let p = ParallelPair::new(i.to_string(), "s", "t");
            if i % 2 == 0 { p.with_score(i as f64 / 10.0) } else { p }
        })
        .collect();
    let kept = select_top_k(&scored, 4, &mut RngStream::named(1, "select"));
    println!("\ntop-4 selection: {:?}", kept.iter().map(|p| (p.id.as_str(), p.score)).collect::<Vec<_>>());
    Ok(())
}
