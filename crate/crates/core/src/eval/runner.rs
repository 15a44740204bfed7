use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::metrics::{exact_match, extract_answer, normalize_answer, token_f1};
use super::prompt::{
    order_examples, recite_request_prompt, render_prompt, Method, OrderPolicy, PromptParts, RECITATION_PREFIX,
    RECITE_REQUEST_TEMPLATE,
};
use super::stats::{coverage_report, population_std, rank_histogram, CoverageReport, EvalScores, RankHistogram};
use crate::embedder::Embedder;
use crate::hints::{extract_hint, ExampleSet, Hint, DEFAULT_ATTRIBUTION_THRESHOLD};
use crate::llm::{CallSettings, ChatModel};
use crate::store::{Corpus, QAExample, RetrievalResult, Retriever};
use crate::util::fnv1a_seeded;

/// Shot counts of the standard ablation.
pub const SHOT_SWEEP: [usize; 4] = [2, 5, 10, 15];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrieverKind {
    #[default]
    Base,
    Her,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_shots")]
    pub shots: usize,
    #[serde(default = "default_ordering")]
    pub ordering: OrderPolicy,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_n_queries")]
    pub n_queries: usize,
    #[serde(default)]
    pub retriever: RetrieverKind,
    /// Render a None hint as plain standard ICL instead of failing the query.
    #[serde(default = "default_true")]
    pub hicl_fallback: bool,
    /// Set by the caller (the pipeline takes it from the LLM settings).
    #[serde(skip, default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default = "default_threshold")]
    pub attribution_threshold: f64,
}

fn default_method() -> Method {
    Method::Hicl
}
fn default_shots() -> usize {
    5
}
fn default_ordering() -> OrderPolicy {
    OrderPolicy::Default
}
fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}
fn default_n_queries() -> usize {
    300
}
fn default_true() -> bool {
    true
}
fn default_concurrency() -> usize {
    4
}
fn default_threshold() -> f64 {
    DEFAULT_ATTRIBUTION_THRESHOLD
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: default_method(),
            shots: default_shots(),
            ordering: default_ordering(),
            seeds: default_seeds(),
            n_queries: default_n_queries(),
            retriever: RetrieverKind::Base,
            hicl_fallback: true,
            concurrency: default_concurrency(),
            attribution_threshold: default_threshold(),
        }
    }
}

impl ExperimentConfig {
    /// Zero-shot always runs with no demonstrations.
    pub fn effective_shots(&self) -> usize {
        if self.method == Method::ZeroShot {
            0
        } else {
            self.shots
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::InvalidConfig(m.to_string()));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return bad("seeds must be distinct");
        }
        if self.n_queries == 0 {
            return bad("n_queries must be positive");
        }
        if self.method.uses_demonstrations() && self.shots == 0 {
            return bad("shots must be positive for few-shot methods");
        }
        if self.concurrency == 0 {
            return bad("concurrency must be positive");
        }
        if !(0.0..=1.0).contains(&self.attribution_threshold) {
            return bad("attribution_threshold must be in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error("test set is empty")]
    EmptyTestSet,
}

/// One scored query. Latency is deliberately left out so transcripts are reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub seed: u64,
    pub method: Method,
    pub query_id: String,
    pub question: String,
    pub gold: Vec<String>,
    /// Demonstration in prompt order.
    pub demonstration: Vec<QAExample>,
    /// Hint text rendered into the prompt, if any.
    pub hint: Option<String>,
    pub recitation: Option<String>,
    pub prompt: String,
    pub response: String,
    pub prediction: String,
    pub em: u8,
    pub f1: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub scores: EvalScores,
    pub failures: usize,
    pub complete: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreStd {
    pub em: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub method: Method,
    pub retriever: String,
    pub shots: usize,
    pub ordering: OrderPolicy,
    pub config: ExperimentConfig,
    /// Every method sees the same sampled queries for a given seed.
    pub paired_sampling: bool,
    pub per_seed: Vec<SeedReport>,
    pub mean: EvalScores,
    /// Population STD across seeds; absent with a single seed.
    pub std: Option<ScoreStd>,
    pub coverage: CoverageReport,
    pub rank_histogram: Option<RankHistogram>,
    pub hint_none_rate: Option<f64>,
    /// Reconstructed RECITE templates, recorded so the baseline is inspectable.
    pub recite_templates: Option<BTreeMap<String, String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRun {
    pub report: ExperimentReport,
    pub transcripts: Vec<Transcript>,
}

/// Everything a run reads besides its config.
#[derive(Clone, Copy)]
pub struct EvalContext<'a> {
    /// Queries are sampled from here.
    pub test: &'a Corpus,
    /// Demonstrations are retrieved from here.
    pub pool: &'a Corpus,
    pub retriever: &'a Retriever,
    pub embedder: &'a Embedder,
    pub llm: &'a dyn ChatModel,
    pub settings: &'a CallSettings,
}

/// Sorted test-set positions sampled for `seed`. Depends only on the seed and
/// the test-set size, so all methods are compared on the same queries.
pub fn sample_queries(n_test: usize, n_queries: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n_test, n_queries.min(n_test)).into_vec();
    idx.sort_unstable();
    idx
}

/// Top-k pool examples for `q`, skipping the query itself and any example whose
/// question is identical after answer normalization.
pub fn retrieve_demonstrations(
    retriever: &Retriever,
    embedder: &Embedder,
    pool: &Corpus,
    q: &QAExample,
    k: usize,
) -> Result<Vec<(QAExample, RetrievalResult)>, String> {
    let qv = embedder.embed(&q.question).map_err(|e| e.to_string())?;
    let nq = normalize_answer(&q.question);
    let hits = retriever
        .retrieve_filtered(&qv, k, |id| {
            id == q.id || pool.get(id).is_some_and(|e| normalize_answer(&e.question) == nq)
        })
        .map_err(|e| e.to_string())?;
    Ok(hits
        .into_iter()
        .filter_map(|r| pool.get(&r.example_id).map(|e| (e.clone(), r)))
        .collect())
}

/// Per-query work that does not depend on the seed.
#[derive(Debug, Clone)]
struct Prepared {
    ranked: Vec<QAExample>,
    hint: Option<Hint>,
    recitation: Option<String>,
}

fn prepare(config: &ExperimentConfig, ctx: &EvalContext<'_>, q: &QAExample) -> Result<Prepared, String> {
    let k = config.effective_shots();
    let mut out = Prepared { ranked: Vec::new(), hint: None, recitation: None };
    if k > 0 {
        let items = retrieve_demonstrations(ctx.retriever, ctx.embedder, ctx.pool, q, k)?;
        out.ranked = items.iter().map(|(e, _)| e.clone()).collect();
        if config.method == Method::Hicl {
            let set = ExampleSet::new(q.id.clone(), items);
            out.hint = Some(extract_hint(ctx.llm, ctx.settings, &q.id, &q.question, &set).map_err(|e| e.to_string())?);
        }
    }
    if config.method == Method::Recite {
        let req = ctx.settings.request(recite_request_prompt(&q.question), format!("recite:{}", q.id));
        let resp = ctx.llm.complete(&req).map_err(|e| e.to_string())?;
        out.recitation = Some(resp.text.trim().to_string());
    }
    Ok(out)
}

fn order_for(policy: OrderPolicy, query_id: &str) -> OrderPolicy {
    match policy {
        OrderPolicy::Random(s) => OrderPolicy::Random(fnv1a_seeded(s, query_id.as_bytes())),
        p => p,
    }
}

fn answer(
    config: &ExperimentConfig,
    ctx: &EvalContext<'_>,
    seed: u64,
    q: &QAExample,
    prep: &Result<Prepared, String>,
) -> Transcript {
    let mut t = Transcript {
        seed,
        method: config.method,
        query_id: q.id.clone(),
        question: q.question.clone(),
        gold: q.answers.clone(),
        demonstration: Vec::new(),
        hint: None,
        recitation: None,
        prompt: String::new(),
        response: String::new(),
        prediction: String::new(),
        em: 0,
        f1: 0.0,
        error: None,
    };
    let prep = match prep {
        Ok(p) => p,
        Err(e) => {
            t.error = Some(e.clone());
            return t;
        }
    };
    t.demonstration = order_examples(&prep.ranked, order_for(config.ordering, &q.id));
    t.recitation = prep.recitation.clone();
    let hint = prep.hint.as_ref();
    if config.method == Method::Hicl {
        t.hint = hint.and_then(Hint::usable_text).map(str::to_string);
    }
    let parts = PromptParts {
        demonstration: &t.demonstration,
        hint,
        recitation: prep.recitation.as_deref(),
        query: &q.question,
    };
    t.prompt = match render_prompt(config.method, parts, config.hicl_fallback) {
        Ok(p) => p,
        Err(e) => {
            t.error = Some(e.to_string());
            return t;
        }
    };
    let req = ctx.settings.request(t.prompt.clone(), format!("answer:{seed}:{}", q.id));
    match ctx.llm.complete(&req) {
        Ok(r) => {
            t.prediction = extract_answer(&r.text);
            t.response = r.text;
            t.em = exact_match(&t.prediction, &q.answers);
            t.f1 = token_f1(&t.prediction, &q.answers);
        }
        Err(e) => t.error = Some(e.to_string()),
    }
    t
}

/// Samples queries per seed, retrieves demonstrations (never the query itself
/// or a question identical after normalization), extracts hints or recitations
/// once per query, renders, completes and scores. Per-query failures end up in
/// the transcripts and mark their seed incomplete.
pub fn run_experiment(config: &ExperimentConfig, ctx: &EvalContext<'_>) -> Result<ExperimentRun, EvalError> {
    config.validate()?;
    if ctx.test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let samples: Vec<(u64, Vec<usize>)> = config
        .seeds
        .iter()
        .map(|&s| (s, sample_queries(ctx.test.len(), config.n_queries, s)))
        .collect();
    let unique: Vec<usize> = samples
        .iter()
        .flat_map(|(_, idx)| idx.iter().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.concurrency)
        .build()
        .expect("thread pool");
    let prepared: HashMap<usize, Result<Prepared, String>> = pool.install(|| {
        unique
            .par_iter()
            .map(|&i| (i, prepare(config, ctx, &ctx.test.examples[i])))
            .collect()
    });
    let jobs: Vec<(u64, usize)> = samples
        .iter()
        .flat_map(|(s, idx)| idx.iter().map(move |&i| (*s, i)))
        .collect();
    let transcripts: Vec<Transcript> = pool.install(|| {
        jobs.par_iter()
            .map(|&(s, i)| answer(config, ctx, s, &ctx.test.examples[i], &prepared[&i]))
            .collect()
    });

    let per_seed: Vec<SeedReport> = config
        .seeds
        .iter()
        .map(|&seed| {
            let mine: Vec<&Transcript> = transcripts.iter().filter(|t| t.seed == seed).collect();
            let failures = mine.iter().filter(|t| t.error.is_some()).count();
            SeedReport {
                seed,
                scores: EvalScores::from_pairs(mine.iter().filter(|t| t.error.is_none()).map(|t| (t.em, t.f1))),
                failures,
                complete: failures == 0,
            }
        })
        .collect();
    let seed_scores: Vec<EvalScores> = per_seed.iter().map(|s| s.scores).collect();
    let std = (seed_scores.len() >= 2).then(|| ScoreStd {
        em: population_std(&seed_scores.iter().map(|s| s.em).collect::<Vec<_>>()).unwrap_or(0.0),
        f1: population_std(&seed_scores.iter().map(|s| s.f1).collect::<Vec<_>>()).unwrap_or(0.0),
    });

    let hints: Vec<Hint> = unique
        .iter()
        .filter_map(|i| prepared[i].as_ref().ok().and_then(|p| p.hint.clone()))
        .collect();
    let (histogram, none_rate) = if config.method == Method::Hicl && !hints.is_empty() {
        let none = hints.iter().filter(|h| h.none_flag).count();
        (
            Some(rank_histogram(&hints, config.attribution_threshold)),
            Some(none as f64 / hints.len() as f64),
        )
    } else {
        (None, None)
    };
    let recite_templates = (config.method == Method::Recite).then(|| {
        BTreeMap::from([
            ("stage1".to_string(), RECITE_REQUEST_TEMPLATE.to_string()),
            ("stage2".to_string(), format!("{RECITATION_PREFIX}{{recitation}}\n\n{{demonstration}}\n\nQ: {{query}}\nA:")),
        ])
    });

    let report = ExperimentReport {
        method: config.method,
        retriever: ctx.retriever.label().to_string(),
        shots: config.effective_shots(),
        ordering: config.ordering,
        config: config.clone(),
        paired_sampling: true,
        mean: EvalScores::mean(&seed_scores),
        per_seed,
        std,
        coverage: coverage_report(&transcripts),
        rank_histogram: histogram,
        hint_none_rate: none_rate,
        recite_templates,
    };
    Ok(ExperimentRun { report, transcripts })
}

/// One run per shot count, everything else taken from `config`.
pub fn run_shot_sweep(
    config: &ExperimentConfig,
    shots: &[usize],
    ctx: &EvalContext<'_>,
) -> Result<Vec<ExperimentRun>, EvalError> {
    shots
        .iter()
        .map(|&k| run_experiment(&ExperimentConfig { shots: k, ..config.clone() }, ctx))
        .collect()
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::embedder::MockEmbedder;
    use crate::llm::{MockChat, MockScript};
    use crate::store::build_index;

    fn qa(id: &str, q: &str, a: &str) -> QAExample {
        QAExample { id: id.into(), question: q.into(), answers: vec![a.into()] }
    }

    struct Fixture {
        test: Corpus,
        pool: Corpus,
        retriever: Retriever,
        embedder: Embedder,
    }

    fn fixture() -> Fixture {
        let pool = Corpus::from_examples(
            vec![
                qa("p1", "Where was child benefit first paid?", "Helsinki"),
                qa("p2", "When did Finland introduce child benefit?", "1948"),
                qa("p3", "What is the capital of France?", "Paris"),
                qa("p4", "Who wrote Hamlet?", "Shakespeare"),
                qa("t1", "When was child benefit first paid in Helsinki?", "1948"),
            ],
            "pool",
        )
        .unwrap();
        let test = Corpus::from_examples(
            vec![
                qa("t1", "When was child benefit first paid in Helsinki?", "1948"),
                qa("t2", "What is the capital city of France?", "Paris"),
                qa("t3", "who wrote hamlet", "William Shakespeare"),
            ],
            "test",
        )
        .unwrap();
        let embedder = Embedder::new(Arc::new(MockEmbedder::new(32, 1)));
        let (index, _) = build_index(&pool, &embedder, None).unwrap();
        Fixture { test, pool, retriever: Retriever::base(index), embedder }
    }

    fn config(method: Method) -> ExperimentConfig {
        ExperimentConfig { method, shots: 2, seeds: vec![1, 2], n_queries: 3, ..Default::default() }
    }

    fn ctx<'a>(f: &'a Fixture, llm: &'a dyn ChatModel, settings: &'a CallSettings) -> EvalContext<'a> {
        EvalContext { test: &f.test, pool: &f.pool, retriever: &f.retriever, embedder: &f.embedder, llm, settings }
    }

    #[test]
    fn sampling_is_seeded_and_shared() {
        assert_eq!(sample_queries(100, 10, 3), sample_queries(100, 10, 3));
        assert_ne!(sample_queries(100, 10, 3), sample_queries(100, 10, 4));
        assert_eq!(sample_queries(5, 300, 0), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn config_validation() {
        assert!(config(Method::Hicl).validate().is_ok());
        assert!(ExperimentConfig { seeds: vec![1, 1], ..config(Method::Hicl) }.validate().is_err());
        assert!(ExperimentConfig { seeds: vec![], ..config(Method::Hicl) }.validate().is_err());
        assert!(ExperimentConfig { shots: 0, ..config(Method::Hicl) }.validate().is_err());
        let zs = ExperimentConfig { shots: 0, ..config(Method::ZeroShot) };
        assert!(zs.validate().is_ok());
        assert_eq!(ExperimentConfig { shots: 7, ..config(Method::ZeroShot) }.effective_shots(), 0);
    }

    #[test]
    fn demonstrations_exclude_the_query() {
        let f = fixture();
        let llm = MockChat::new(MockScript::new());
        let settings = CallSettings::new("mock");
        let run = run_experiment(&ExperimentConfig { shots: 5, ..config(Method::StandardIcl) }, &ctx(&f, &llm, &settings)).unwrap();
        assert_eq!(run.transcripts.len(), 6);
        for t in &run.transcripts {
            assert!(t.demonstration.iter().all(|d| d.id != t.query_id));
            assert!(t.demonstration.iter().all(|d| normalize_answer(&d.question) != normalize_answer(&t.question)));
            assert_eq!(t.demonstration.len(), if t.query_id == "t2" { 5 } else { 4 });
        }
    }

    #[test]
    fn planted_hint_makes_the_difference() {
        let f = fixture();
        let hint = "Child benefit was first paid in Helsinki in 1948.";
        let script = MockScript::new()
            .substring("information related to When was child benefit", hint)
            .substring(format!("Hint: {hint}"), "1948");
        let llm = MockChat::new(script);
        let settings = CallSettings::new("mock");
        let c = ctx(&f, &llm, &settings);
        let std = run_experiment(&config(Method::StandardIcl), &c).unwrap();
        let hicl = run_experiment(&config(Method::Hicl), &c).unwrap();
        assert!(hicl.report.mean.em > std.report.mean.em);
        assert_eq!(std.report.mean.em, 0.0);
        let h = hicl.report.rank_histogram.as_ref().unwrap();
        assert_eq!(h.total(), 3);
        assert_eq!(hicl.report.hint_none_rate, Some(2.0 / 3.0));
        for t in &hicl.transcripts {
            assert!(t.f1 >= f64::from(t.em));
        }
    }

    #[test]
    fn deterministic_and_failure_tolerant() {
        let f = fixture();
        let llm = MockChat::new(MockScript::new().substring("capital", "Paris"));
        let settings = CallSettings::new("mock");
        let c = ctx(&f, &llm, &settings);
        let a = run_experiment(&config(Method::Hicl), &c).unwrap();
        let b = run_experiment(&config(Method::Hicl), &c).unwrap();
        assert_eq!(serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
        assert_eq!(a.transcripts, b.transcripts);
        assert!(a.report.per_seed.iter().all(|s| s.complete));

        let strict = ExperimentConfig { hicl_fallback: false, ..config(Method::Hicl) };
        let r = run_experiment(&strict, &c).unwrap();
        assert!(r.report.per_seed.iter().all(|s| !s.complete));
        assert!(r.transcripts.iter().any(|t| t.error.is_some()));
    }

    #[test]
    fn recite_and_zero_shot_shapes() {
        let f = fixture();
        let llm = MockChat::new(MockScript::new().substring("Recite a passage", "France's capital is Paris."));
        let settings = CallSettings::new("mock");
        let c = ctx(&f, &llm, &settings);
        let r = run_experiment(&config(Method::Recite), &c).unwrap();
        assert!(r.report.recite_templates.is_some());
        assert!(r.transcripts.iter().all(|t| t.prompt.starts_with("Recitation: France's capital is Paris.")));
        let z = run_experiment(&config(Method::ZeroShot), &c).unwrap();
        assert!(z.transcripts.iter().all(|t| t.demonstration.is_empty() && t.prompt.matches("Q: ").count() == 1));
        assert_eq!(z.report.shots, 0);

        let sweep = run_shot_sweep(&config(Method::StandardIcl), &[1, 2, 3], &c).unwrap();
        assert_eq!(sweep.iter().map(|r| r.report.shots).collect::<Vec<_>>(), [1, 2, 3]);
    }
}
