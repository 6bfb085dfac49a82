//! Parallel-corpus plumbing: TSV ingestion, document-level grouping,
//! score-ranked selection and synthetic toy tasks.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BOS, EOS, PAD, UNK};
use crate::numerics::RngStream;

pub const META_KEYS: [&str; 6] = ["url", "domain", "topic", "conversation_id", "turn_index", "language"];
pub const FLORES_GROUP_KEYS: [&str; 3] = ["url", "domain", "topic"];
pub const FLORES_WINDOW: usize = 3;
pub const DEFAULT_TOP_K: usize = 150_000;

#[derive(Debug, Clone, PartialEq)]
pub struct ParallelPair {
    pub id: String,
    pub src: String,
    pub tgt: String,
    pub score: Option<f64>,
    pub meta: BTreeMap<String, String>,
}

impl ParallelPair {
    pub fn new(id: impl Into<String>, src: impl Into<String>, tgt: impl Into<String>) -> Self {
        ParallelPair {
            id: id.into(),
            src: src.into(),
            tgt: tgt.into(),
            score: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.src.trim().is_empty() || self.tgt.trim().is_empty() {
            return Err(Error::Integrity(format!("pair `{}` has an empty side", self.id)));
        }
        if self.meta.contains_key("conversation_id") != self.meta.contains_key("turn_index") {
            return Err(Error::Integrity(format!(
                "pair `{}`: conversation_id and turn_index must appear together",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocUnit {
    pub src_doc: String,
    pub tgt_doc: String,
    pub n_sentences: usize,
    pub provenance: Vec<String>,
}

impl DocUnit {
    fn join(pairs: &[&ParallelPair]) -> Self {
        DocUnit {
            src_doc: pairs.iter().map(|p| p.src.as_str()).collect::<Vec<_>>().join(" "),
            tgt_doc: pairs.iter().map(|p| p.tgt.as_str()).collect::<Vec<_>>().join(" "),
            n_sentences: pairs.len(),
            provenance: pairs.iter().map(|p| p.id.clone()).collect(),
        }
    }
}

/// A pair that could not be placed in any group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    pub id: String,
    pub missing_key: String,
}

fn tsv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .flexible(true)
        .from_reader(file))
}

fn tsv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new()
        .delimiter(b'\t')
        .quote_style(csv::QuoteStyle::Never)
        .from_writer(file))
}

/// Reads `src`, `tgt` and any of `id`, `score` and the metadata columns.
/// Rows without an `id` column are numbered from 0.
pub fn read_pairs_tsv(path: &Path) -> Result<Vec<ParallelPair>> {
    let mut rdr = tsv_reader(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (src_col, tgt_col) = match (col("src"), col("tgt")) {
        (Some(s), Some(t)) => (s, t),
        _ => {
            return Err(Error::Config(format!(
                "{}: header must name `src` and `tgt` columns",
                path.display()
            )))
        }
    };
    let id_col = col("id");
    let score_col = col("score");
    let meta_cols: Vec<(&str, usize)> = META_KEYS.iter().filter_map(|k| col(k).map(|c| (*k, c))).collect();
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |c: usize| rec.get(c).unwrap_or("").trim();
        let id = id_col.map(|c| field(c).to_string()).unwrap_or_else(|| i.to_string());
        let mut pair = ParallelPair::new(id, field(src_col), field(tgt_col));
        if let Some(c) = score_col {
            let s = field(c);
            if !s.is_empty() {
                pair.score = Some(s.parse().map_err(|_| {
                    Error::Config(format!("{}: row {}: bad score `{s}`", path.display(), i + 1))
                })?);
            }
        }
        for (k, c) in &meta_cols {
            let v = field(*c);
            if !v.is_empty() {
                pair.meta.insert(k.to_string(), v.to_string());
            }
        }
        pair.validate()?;
        out.push(pair);
    }
    Ok(out)
}

pub fn write_pairs_tsv(path: &Path, pairs: &[ParallelPair]) -> Result<()> {
    let mut w = tsv_writer(path)?;
    let mut header = vec!["id", "src", "tgt", "score"];
    header.extend(META_KEYS);
    w.write_record(&header)?;
    for p in pairs {
        let mut row = vec![
            p.id.clone(),
            p.src.clone(),
            p.tgt.clone(),
            p.score.map(|s| s.to_string()).unwrap_or_default(),
        ];
        row.extend(META_KEYS.iter().map(|k| p.meta.get(*k).cloned().unwrap_or_default()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_docs_tsv(path: &Path, docs: &[DocUnit]) -> Result<()> {
    let mut w = tsv_writer(path)?;
    w.write_record(["src_doc", "tgt_doc", "n_sentences", "provenance"])?;
    for d in docs {
        w.write_record([
            d.src_doc.as_str(),
            d.tgt_doc.as_str(),
            &d.n_sentences.to_string(),
            &d.provenance.join(","),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Groups pairs by the values of `group_keys` and joins consecutive windows
/// of `window` sentences. Groups appear in order of first occurrence; a short
/// trailing window is kept. Pairs lacking a key are returned as rejections.
pub fn build_flores_docs(
    pairs: &[ParallelPair],
    group_keys: &[&str],
    window: usize,
) -> Result<(Vec<DocUnit>, Vec<Rejection>)> {
    if window == 0 {
        return Err(Error::Config("window must be at least 1".into()));
    }
    let mut order: Vec<Vec<&str>> = Vec::new();
    let mut groups: HashMap<Vec<&str>, Vec<&ParallelPair>> = HashMap::new();
    let mut rejected = Vec::new();
    'pairs: for p in pairs {
        let mut key = Vec::with_capacity(group_keys.len());
        for k in group_keys {
            match p.meta.get(*k) {
                Some(v) => key.push(v.as_str()),
                None => {
                    rejected.push(Rejection {
                        id: p.id.clone(),
                        missing_key: k.to_string(),
                    });
                    continue 'pairs;
                }
            }
        }
        groups
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(p);
    }
    for r in &rejected {
        warn!("pair `{}` lacks group key `{}`", r.id, r.missing_key);
    }
    let docs = order
        .iter()
        .flat_map(|k| groups[k].chunks(window).map(DocUnit::join).collect::<Vec<_>>())
        .collect();
    Ok((docs, rejected))
}

/// One unit per conversation, turns in `turn_index` order, units sorted by conversation id.
pub fn merge_conversations(pairs: &[ParallelPair]) -> Result<Vec<DocUnit>> {
    let mut convs: BTreeMap<&str, Vec<(i64, &ParallelPair)>> = BTreeMap::new();
    for p in pairs {
        let (Some(cid), Some(turn)) = (p.meta.get("conversation_id"), p.meta.get("turn_index")) else {
            return Err(Error::Integrity(format!(
                "pair `{}` lacks conversation_id or turn_index",
                p.id
            )));
        };
        let turn: i64 = turn
            .parse()
            .map_err(|_| Error::Integrity(format!("pair `{}`: bad turn_index `{turn}`", p.id)))?;
        convs.entry(cid.as_str()).or_default().push((turn, p));
    }
    let mut out = Vec::with_capacity(convs.len());
    for (cid, mut turns) in convs {
        turns.sort_by_key(|(t, _)| *t);
        if let Some(w) = turns.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Integrity(format!(
                "conversation `{cid}` repeats turn {}",
                w[0].0
            )));
        }
        let ordered: Vec<&ParallelPair> = turns.into_iter().map(|(_, p)| p).collect();
        out.push(DocUnit::join(&ordered));
    }
    Ok(out)
}

/// Highest-scoring pairs first (stable on ties), then a seeded uniform draw
/// from the unscored pairs to make up any shortfall.
pub fn select_top_k(pairs: &[ParallelPair], k: usize, rng: &mut RngStream) -> Vec<ParallelPair> {
    let mut scored: Vec<&ParallelPair> = pairs.iter().filter(|p| p.score.is_some()).collect();
    scored.sort_by(|a, b| b.score.unwrap().total_cmp(&a.score.unwrap()));
    let mut out: Vec<ParallelPair> = scored.into_iter().take(k).cloned().collect();
    let short = k - out.len();
    if short > 0 {
        let unscored: Vec<&ParallelPair> = pairs.iter().filter(|p| p.score.is_none()).collect();
        let take = short.min(unscored.len());
        let picks = rand::seq::index::sample(rng, unscored.len(), take);
        out.extend(picks.into_iter().map(|i| unscored[i].clone()));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyKind {
    Copy,
    Reverse,
    MappedTranslate,
}

impl ToyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ToyKind::Copy => "copy",
            ToyKind::Reverse => "reverse",
            ToyKind::MappedTranslate => "mapped-translate",
        }
    }
}

impl fmt::Display for ToyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ToyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(ToyKind::Copy),
            "reverse" => Ok(ToyKind::Reverse),
            "mapped-translate" | "mapped" => Ok(ToyKind::MappedTranslate),
            other => Err(Error::Config(format!(
                "unknown toy task `{other}` (expected copy|reverse|mapped-translate)"
            ))),
        }
    }
}

/// Seed of the token permutation behind the mapped-translate task. Fixed so
/// that every split of a task shares one mapping.
pub const TOY_MAP_SEED: u64 = 0x5eed_0f_7a5c;

/// A synthetic sequence task over `vocab - 4` content symbols `w0, w1, ...`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyTask {
    pub kind: ToyKind,
    pub vocab: usize,
    map: Vec<usize>,
}

impl ToyTask {
    pub fn new(kind: ToyKind, vocab: usize) -> Result<Self> {
        if vocab <= 4 {
            return Err(Error::Config(format!(
                "toy vocabulary {vocab} leaves no room beside the 4 special tokens"
            )));
        }
        let n = vocab - 4;
        let mut rng = RngStream::named(TOY_MAP_SEED, "toy-map");
        let mut map: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            map.swap(i, rng.below(i + 1));
        }
        Ok(ToyTask { kind, vocab, map })
    }

    pub fn symbols(&self) -> usize {
        self.map.len()
    }

    /// The bijection used by mapped-translate.
    pub fn token_map(&self) -> &[usize] {
        &self.map
    }

    /// Target symbol indices for source symbol indices.
    pub fn apply(&self, src: &[usize]) -> Vec<usize> {
        match self.kind {
            ToyKind::Copy => src.to_vec(),
            ToyKind::Reverse => src.iter().rev().copied().collect(),
            ToyKind::MappedTranslate => {
                let mut out: Vec<usize> = src.iter().map(|&s| self.map[s]).collect();
                for pair in out.chunks_mut(2) {
                    pair.reverse();
                }
                out
            }
        }
    }

    pub fn sample(&self, len_range: (usize, usize), n: usize, rng: &mut RngStream) -> Result<Vec<ParallelPair>> {
        let (lo, hi) = len_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("invalid length range ({lo}, {hi})")));
        }
        let spell = |ids: &[usize]| ids.iter().map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        Ok((0..n)
            .map(|i| {
                let len = rng.range_inclusive(lo, hi);
                let src: Vec<usize> = (0..len).map(|_| rng.below(self.symbols())).collect();
                ParallelPair::new(i.to_string(), spell(&src), spell(&self.apply(&src)))
            })
            .collect())
    }
}

pub fn gen_toy_task(
    kind: ToyKind,
    vocab: usize,
    len_range: (usize, usize),
    n: usize,
    rng: &mut RngStream,
) -> Result<Vec<ParallelPair>> {
    ToyTask::new(kind, vocab)?.sample(len_range, n, rng)
}

pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Closed whitespace vocabulary: the four specials, then language tags, then tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(lang_tags: &[&str], tokens: impl IntoIterator<Item = String>) -> Self {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut seen: HashSet<String> = all.iter().cloned().collect();
        for t in lang_tags.iter().map(|t| t.to_string()).chain(tokens) {
            if seen.insert(t.clone()) {
                all.push(t);
            }
        }
        let index = all.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens: all, index }
    }

    /// Every whitespace token of `texts`, sorted.
    pub fn from_texts<'a>(lang_tags: &[&str], texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut toks: Vec<String> = texts
            .into_iter()
            .flat_map(str::split_whitespace)
            .map(str::to_string)
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        toks.sort();
        Self::new(lang_tags, toks)
    }

    /// Vocabulary of a toy task: `vocab` entries in all.
    pub fn toy(vocab: usize) -> Self {
        Self::new(&[], (0..vocab.saturating_sub(SPECIALS.len())).map(|i| format!("w{i}")))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|t| self.id(t).unwrap_or(UNK)).collect()
    }

    /// Source layout: optional tags, the tokens, then end-of-sequence.
    pub fn encode_source(&self, text: &str, tags: &[&str]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(tags.len() + 8);
        for t in tags {
            out.push(
                self.id(t)
                    .ok_or_else(|| Error::Config(format!("unknown language tag `{t}`")))?,
            );
        }
        out.extend(self.encode(text));
        out.push(EOS);
        Ok(out)
    }

    /// Joins tokens with single spaces, dropping padding, BOS and EOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD && i != BOS && i != EOS)
            .map(|&i| self.token(i).unwrap_or(SPECIALS[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }
}
