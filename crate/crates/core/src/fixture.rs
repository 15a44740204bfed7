//! A planted QA fixture built from made-up words, so a scripted mock LLM can
//! answer exactly the queries whose hint it was given.
//!
//! Each topic has a name, a verb, a year and a place. Training holds two
//! questions per topic (when / where); the test set asks one combined question
//! for the first `test_topics` topics. The hint for a topic is
//! `"{Name}: {verb}, {year}, {Place}."`, which overlaps its own training
//! examples strongly and every other topic not at all.

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::store::{write_corpus, QAExample};

const SYLLABLES: [&str; 20] = [
    "ka", "lo", "vi", "dra", "mer", "ton", "sil", "bru", "quen", "zar", "pel", "rik", "mo", "sta", "fen", "gol",
    "nyx", "tav", "ulm", "sor",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Topic {
    pub name: String,
    pub verb: String,
    pub year: u32,
    pub place: String,
}

impl Topic {
    pub fn hint(&self) -> String {
        format!("{}: {}, {}, {}.", self.name, self.verb, self.year, self.place)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedFixture {
    pub topics: Vec<Topic>,
    pub train: Vec<QAExample>,
    pub test: Vec<QAExample>,
}

fn word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    (0..syllables).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect()
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
}

pub fn planted(topics: usize, test_topics: usize, seed: u64) -> PlantedFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = BTreeSet::new();
    let mut fresh = |rng: &mut ChaCha8Rng, n: usize| loop {
        let w = word(rng, n);
        if used.insert(w.clone()) {
            return w;
        }
    };
    let mut years: Vec<u32> = (1700..2000).collect();
    years.shuffle(&mut rng);
    let topics: Vec<Topic> = (0..topics)
        .map(|i| {
            let n = rng.gen_range(2..=3);
            Topic {
                name: capitalize(&fresh(&mut rng, n)),
                verb: fresh(&mut rng, 2),
                year: years[i % years.len()],
                place: capitalize(&fresh(&mut rng, 3)),
            }
        })
        .collect();
    let mut train = Vec::new();
    for (i, t) in topics.iter().enumerate() {
        train.push(QAExample {
            id: format!("tr-{i:03}-when"),
            question: format!("When did {} {}?", t.name, t.verb),
            answers: vec![t.year.to_string()],
        });
        train.push(QAExample {
            id: format!("tr-{i:03}-where"),
            question: format!("Where did {} {}?", t.name, t.verb),
            answers: vec![t.place.clone()],
        });
    }
    let test = topics
        .iter()
        .take(test_topics)
        .enumerate()
        .map(|(i, t)| QAExample {
            id: format!("te-{i:03}"),
            question: format!("In which year did {} {} at {}?", t.name, t.verb, t.place),
            answers: vec![t.year.to_string()],
        })
        .collect();
    PlantedFixture { topics, train, test }
}

fn hint_rule(question: &str) -> String {
    format!("related to {question}")
}

/// Mock script that returns the planted hint for every training query and for
/// test queries whose index is not a multiple of `none_every`, and answers a
/// test query correctly only when its hint is in the prompt. Everything else
/// gets "None".
pub fn hint_script(f: &PlantedFixture, none_every: usize) -> Vec<serde_json::Value> {
    let mut lines = Vec::new();
    for (i, t) in f.topics.iter().enumerate() {
        for q in f.train.iter().skip(2 * i).take(2) {
            lines.push(json!({ "match": hint_rule(&q.question), "response": t.hint() }));
        }
    }
    for (i, q) in f.test.iter().enumerate() {
        if none_every == 0 || i % none_every != none_every - 1 {
            lines.push(json!({ "match": hint_rule(&q.question), "response": f.topics[i].hint() }));
        }
    }
    for (i, q) in f.test.iter().enumerate() {
        lines.push(json!({ "match": format!("Hint: {}", f.topics[i].hint()), "response": q.answers[0] }));
    }
    lines.push(json!({ "default": "None" }));
    lines
}

/// Mock script whose hint calls all return "None"; even-indexed test queries
/// are answered correctly from the plain few-shot prompt.
pub fn none_script(f: &PlantedFixture) -> Vec<serde_json::Value> {
    let mut lines: Vec<serde_json::Value> = f
        .test
        .iter()
        .step_by(2)
        .map(|q| json!({ "match": format!("Q: {}\nA:", q.question), "response": q.answers[0] }))
        .collect();
    lines.push(json!({ "default": "None" }));
    lines
}

fn write_lines(path: &Path, lines: &[serde_json::Value]) -> io::Result<()> {
    let body: String = lines.iter().map(|l| format!("{l}\n")).collect();
    fs::write(path, body)
}

/// Pipeline config for the fixture written by [`write_planted`].
pub const FIXTURE_CONFIG: &str = r#"out_dir = "out"
seed = 0

[corpus]
train = "train.jsonl"
test = "test.jsonl"

[embedder]
kind = "mock"
dim = 64

[llm]
kind = "mock"
model_id = "mock-chat"
mock_script = "script.jsonl"
concurrency = 4

[hints]
k = 5

[her]
batch_size = 16
epochs = 3
learning_rate = 0.01

[experiment]
shots = 5
n_queries = 30
seeds = [0, 1, 2]

[eval]
methods = ["zero_shot", "standard_icl", "recite", "hicl"]
retrievers = ["base", "her"]
orderings = ["default", "reverse", "random:1", "random:2"]
shot_sweep = [2, 5, 10, 15]
"#;

/// Writes train/test corpora, both mock scripts and `hicl.toml` into `dir`.
pub fn write_planted(dir: &Path, f: &PlantedFixture) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    write_corpus(dir.join("train.jsonl"), &f.train)?;
    write_corpus(dir.join("test.jsonl"), &f.test)?;
    write_lines(&dir.join("script.jsonl"), &hint_script(f, 4))?;
    write_lines(&dir.join("none_script.jsonl"), &none_script(f))?;
    fs::write(dir.join("hicl.toml"), FIXTURE_CONFIG)
}

/// The fixture shipped in the repository's `fixtures/planted` directory.
pub fn default_planted() -> PlantedFixture {
    planted(60, 40, 7)
}
