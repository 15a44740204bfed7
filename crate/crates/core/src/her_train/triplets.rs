use std::collections::HashMap;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedder::Embedder;
use crate::hints::{extract_hint, ExampleSet, Hint};
use crate::llm::{CallSettings, ChatModel};
use crate::store::{Corpus, QAExample, Retriever};
use crate::util::fnv1a_seeded;

/// (query, hint-related example, unrelated example) training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub query_id: String,
    pub query_text: String,
    pub positive: QAExample,
    pub negative: QAExample,
    pub f1_pos: f64,
    pub f1_neg: f64,
    pub hint_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason", content = "detail")]
pub enum SkipReason {
    NoneHint,
    NoPositive,
    NoNegative,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub query_id: String,
    #[serde(flatten)]
    pub reason: SkipReason,
}

#[derive(Debug, Clone, Default)]
pub struct TripletBuild {
    pub triplets: Vec<Triplet>,
    pub hints: Vec<Hint>,
    pub skipped: Vec<SkipRecord>,
}

/// Per-query RNG so results do not depend on processing order.
fn query_rng(seed: u64, query_id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(fnv1a_seeded(seed, query_id.as_bytes()))
}

/// Positive: highest-overlap example at or above `tau_pos` (ties go to the better rank).
/// Negative: uniform seeded draw among the other examples at or below `tau_neg`.
pub fn select_triplet(
    query: &QAExample,
    hint: &Hint,
    examples: &Corpus,
    tau_pos: f64,
    tau_neg: f64,
    seed: u64,
) -> Result<Triplet, SkipReason> {
    if hint.none_flag {
        return Err(SkipReason::NoneHint);
    }
    let att = &hint.source_attribution;
    let mut best: Option<usize> = None;
    for (i, a) in att.iter().enumerate() {
        if a.overlap_f1 >= tau_pos && best.is_none_or(|b| a.overlap_f1 > att[b].overlap_f1) {
            best = Some(i);
        }
    }
    let pos = best.ok_or(SkipReason::NoPositive)?;
    let candidates: Vec<usize> = (0..att.len())
        .filter(|&i| i != pos && att[i].overlap_f1 <= tau_neg)
        .collect();
    let mut rng = query_rng(seed, &query.id);
    let &neg = candidates.choose(&mut rng).ok_or(SkipReason::NoNegative)?;
    let lookup = |id: &str| {
        examples
            .get(id)
            .cloned()
            .ok_or_else(|| SkipReason::Failed(format!("example {id:?} not in corpus")))
    };
    Ok(Triplet {
        query_id: query.id.clone(),
        query_text: query.question.clone(),
        positive: lookup(&att[pos].example_id)?,
        negative: lookup(&att[neg].example_id)?,
        f1_pos: att[pos].overlap_f1,
        f1_neg: att[neg].overlap_f1,
        hint_text: hint.text.clone(),
    })
}

/// Turns previously extracted hints into triplets. Queries without a hint are skipped.
pub fn triplets_from_hints(
    queries: &[QAExample],
    hints: &[Hint],
    examples: &Corpus,
    tau_pos: f64,
    tau_neg: f64,
    seed: u64,
) -> TripletBuild {
    let by_query: HashMap<&str, &Hint> = hints.iter().map(|h| (h.query_id.as_str(), h)).collect();
    let mut out = TripletBuild::default();
    for q in queries {
        let Some(hint) = by_query.get(q.id.as_str()) else {
            out.skipped.push(SkipRecord {
                query_id: q.id.clone(),
                reason: SkipReason::Failed("no hint extracted".into()),
            });
            continue;
        };
        out.hints.push((*hint).clone());
        match select_triplet(q, hint, examples, tau_pos, tau_neg, seed) {
            Ok(t) => out.triplets.push(t),
            Err(reason) => out.skipped.push(SkipRecord {
                query_id: q.id.clone(),
                reason,
            }),
        }
    }
    out
}

/// Full construction: retrieve top-k for each training query (excluding the
/// query itself), extract a hint, then select the triplet. Per-query failures
/// are recorded and skipped.
#[allow(clippy::too_many_arguments)]
pub fn build_triplets(
    queries: &[QAExample],
    examples: &Corpus,
    retriever: &Retriever,
    embedder: &Embedder,
    llm: &dyn ChatModel,
    settings: &CallSettings,
    k: usize,
    tau_pos: f64,
    tau_neg: f64,
    seed: u64,
    concurrency: usize,
) -> TripletBuild {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(concurrency.max(1))
        .build()
        .expect("thread pool");
    let hints: Vec<Result<Hint, String>> = pool.install(|| {
        queries
            .par_iter()
            .map(|q| {
                let qv = embedder.embed(&q.question).map_err(|e| e.to_string())?;
                let hits = retriever
                    .retrieve_filtered(&qv, k, |id| id == q.id)
                    .map_err(|e| e.to_string())?;
                let items = hits
                    .into_iter()
                    .filter_map(|r| examples.get(&r.example_id).map(|e| (e.clone(), r)))
                    .collect();
                let set = ExampleSet::new(q.id.clone(), items);
                extract_hint(llm, settings, &q.id, &q.question, &set).map_err(|e| e.to_string())
            })
            .collect()
    });
    let mut ok_hints = Vec::new();
    let mut failed = Vec::new();
    for (q, h) in queries.iter().zip(hints) {
        match h {
            Ok(h) => ok_hints.push(h),
            Err(e) => failed.push(SkipRecord {
                query_id: q.id.clone(),
                reason: SkipReason::Failed(e),
            }),
        }
    }
    let mut out = triplets_from_hints(queries, &ok_hints, examples, tau_pos, tau_neg, seed);
    out.skipped.retain(|s| !failed.iter().any(|f| f.query_id == s.query_id));
    out.skipped.extend(failed);
    out.skipped.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    out
}

pub fn write_triplets(path: &Path, triplets: &[Triplet]) -> io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for t in triplets {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_triplets(path: &Path) -> io::Result<Vec<Triplet>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?);
    }
    Ok(out)
}
