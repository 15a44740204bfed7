//! Reproducible pipeline stages over a shared output directory.
//!
//! Layout under `out_dir`:
//! `index/` vector cache, `hints/` test-query hints, `triplets/` mined
//! triplets, `her/` trained head, `eval/` run reports and transcripts,
//! `report/` rendered tables, `logs/` LLM replay logs. Every stage writes a
//! `stage.json` with a config snapshot, input and output hashes; a rerun whose
//! fingerprint differs from the recorded one is rejected.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::{ConfigError, PipelineConfig, ProviderKind};
use crate::embedder::{EmbedError, Embedder, EmbeddingProvider, HttpEmbedder, MockEmbedder};
use crate::eval::report::{
    order_table, rank_histogram_csv, read_json, shot_curve_csv, summary_table, write_json, write_jsonl,
    write_transcripts,
};
use crate::eval::{
    order_sensitivity, rank_histogram, retrieve_demonstrations, run_experiment, EvalContext, EvalError,
    ExperimentConfig, ExperimentReport, Method, OrderPolicy, RankHistogram, RetrieverKind,
};
use crate::her_train::{
    build_triplets, read_checkpoint, read_triplets, train, write_checkpoint, write_triplets, EmbeddedTriplet,
    SkipReason, TrainError,
};
use crate::hints::{extract_hint, ExampleSet, Hint};
use crate::http::HttpTransport;
use crate::llm::{CallSettings, ChatModel, HttpChatClient, LlmError, MockChat, MockScript, Recorder, ReplayChat};
use crate::store::{build_index, load_corpus, load_index, Corpus, Index, QAExample, Retriever, StoreError};
use crate::util::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    BuildIndex,
    ExtractHints,
    BuildTriplets,
    TrainHer,
    Eval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::BuildIndex,
        Stage::ExtractHints,
        Stage::BuildTriplets,
        Stage::TrainHer,
        Stage::Eval,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::BuildIndex => "build-index",
            Stage::ExtractHints => "extract-hints",
            Stage::BuildTriplets => "build-triplets",
            Stage::TrainHer => "train-her",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }

    pub fn dir(self) -> &'static str {
        match self {
            Stage::BuildIndex => "index",
            Stage::ExtractHints => "hints",
            Stage::BuildTriplets => "triplets",
            Stage::TrainHer => "her",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("missing {path}; run `{needs}` first")]
    MissingArtifact { path: PathBuf, needs: &'static str },
    #[error("{stage} outputs in {dir} were produced from different inputs or settings; use a fresh output directory or remove it")]
    Conflict { stage: &'static str, dir: PathBuf },
    #[error("{0}")]
    Mismatch(String),
}

impl PipelineError {
    /// Stable machine-readable error category.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::Store(_) => "store",
            PipelineError::Embed(_) => "embedder",
            PipelineError::Llm(_) => "llm",
            PipelineError::Train(TrainError::InsufficientData(_)) => "insufficient_data",
            PipelineError::Train(_) => "train",
            PipelineError::Eval(_) => "eval",
            PipelineError::Io { .. } => "io",
            PipelineError::MissingArtifact { .. } => "missing_artifact",
            PipelineError::Conflict { .. } => "conflict",
            PipelineError::Mismatch(_) => "mismatch",
        }
    }

    /// The file the error is about, when there is one.
    pub fn path(&self) -> Option<String> {
        match self {
            PipelineError::Io { path, .. } | PipelineError::MissingArtifact { path, .. } => {
                Some(path.display().to_string())
            }
            PipelineError::Conflict { dir, .. } => Some(dir.display().to_string()),
            PipelineError::Store(StoreError::Io { path, .. }) => Some(path.display().to_string()),
            PipelineError::Config(ConfigError::Io { path, .. } | ConfigError::Parse { path, .. }) => {
                Some(path.display().to_string())
            }
            _ => None,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

fn file_hash(path: &Path) -> Result<String, PipelineError> {
    fs::read(path).map(sha256_hex).map_err(io_err(path))
}

/// What a stage recorded about its last run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub fingerprint: String,
    pub config: Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub summary: Value,
}

/// Which run keys belong to which table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalPlanIndex {
    pub main: Vec<String>,
    pub order: Vec<String>,
    pub shots: Vec<String>,
}

pub struct Pipeline {
    pub config: PipelineConfig,
    transport: Arc<dyn HttpTransport>,
    replay: Option<PathBuf>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, transport: Arc<dyn HttpTransport>) -> Self {
        Self { config, transport, replay: None }
    }

    /// Answer every LLM call from a replay log (a file, or a directory of `*.jsonl`).
    pub fn with_replay(mut self, path: Option<PathBuf>) -> Self {
        self.replay = path;
        self
    }

    pub fn out(&self, rel: &str) -> PathBuf {
        self.config.out_dir.join(rel)
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.config.out_dir.join(stage.dir())
    }

    pub fn index_path(&self) -> PathBuf {
        self.out("index/vectors.bin")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out("her/head.bin")
    }

    pub fn run(&self, stage: Stage) -> Result<StageRecord, PipelineError> {
        match stage {
            Stage::BuildIndex => self.build_index(),
            Stage::ExtractHints => self.extract_hints(),
            Stage::BuildTriplets => self.build_triplets(),
            Stage::TrainHer => self.train_her(),
            Stage::Eval => self.eval(),
            Stage::Report => self.report(),
        }
    }

    // ---- providers ----

    fn embedder(&self) -> Embedder {
        let e = &self.config.embedder;
        let provider: Arc<dyn EmbeddingProvider> = match e.kind {
            ProviderKind::Mock => Arc::new(MockEmbedder::new(e.dim, e.mock_seed)),
            ProviderKind::Http => Arc::new(HttpEmbedder::new(
                e.endpoint.clone().unwrap_or_default(),
                e.model_id.clone().unwrap_or_default(),
                e.dim,
                std::env::var(&e.token_env).ok(),
                self.transport.clone(),
            )),
        };
        Embedder::new(provider).with_limits(e.batch_size, e.concurrency)
    }

    fn warm_embedder(&self) -> Result<Embedder, PipelineError> {
        let emb = self.embedder();
        crate::store::warm_embedder(&emb, &self.index_path())?;
        Ok(emb)
    }

    fn settings(&self) -> CallSettings {
        CallSettings {
            model_id: self.config.llm.model_id.clone(),
            temperature: self.config.llm.temperature,
            max_tokens: self.config.llm.max_tokens,
        }
    }

    fn replay_files(path: &Path) -> Result<Vec<PathBuf>, PipelineError> {
        if path.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(path)
                .map_err(io_err(path))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
                .collect();
            files.sort();
            Ok(files)
        } else {
            Ok(vec![path.to_path_buf()])
        }
    }

    /// The configured model, recorded to `logs/<stage>.jsonl`, or the replay log.
    fn llm(&self, stage: Stage) -> Result<Arc<dyn ChatModel>, PipelineError> {
        if let Some(r) = &self.replay {
            return Ok(Arc::new(ReplayChat::load_many(&Self::replay_files(r)?)?));
        }
        let l = &self.config.llm;
        let inner: Arc<dyn ChatModel> = match l.kind {
            ProviderKind::Mock => {
                let script = match &l.mock_script {
                    Some(p) => MockScript::load(p)?,
                    None => MockScript::new(),
                };
                Arc::new(MockChat::new(script))
            }
            ProviderKind::Http => Arc::new(HttpChatClient::new(
                l.endpoint.clone().unwrap_or_default(),
                std::env::var(&l.token_env).ok(),
                self.transport.clone(),
            )),
        };
        let logs = self.out("logs");
        fs::create_dir_all(&logs).map_err(io_err(&logs))?;
        let log = logs.join(format!("{}.jsonl", stage.name()));
        if log.exists() {
            fs::remove_file(&log).map_err(io_err(&log))?;
        }
        Ok(Arc::new(Recorder::new(inner, log)?))
    }

    // ---- inputs ----

    fn load_train(&self) -> Result<Corpus, PipelineError> {
        Ok(load_corpus(&self.config.corpus.train)?)
    }

    fn load_test(&self) -> Result<Corpus, PipelineError> {
        Ok(load_corpus(&self.config.corpus.test)?)
    }

    fn require(&self, path: PathBuf, needs: Stage) -> Result<PathBuf, PipelineError> {
        if path.exists() {
            Ok(path)
        } else {
            Err(PipelineError::MissingArtifact { path, needs: needs.name() })
        }
    }

    fn load_train_index(&self, train: &Corpus) -> Result<Index, PipelineError> {
        let p = self.require(self.index_path(), Stage::BuildIndex)?;
        Ok(load_index(train, &p)?)
    }

    fn llm_snapshot(&self) -> Value {
        let mut l = self.config.llm.clone();
        l.mock_script = None;
        json!(l)
    }

    fn script_inputs(&self, inputs: &mut BTreeMap<String, String>) -> Result<(), PipelineError> {
        if self.config.llm.kind == ProviderKind::Mock {
            if let Some(p) = &self.config.llm.mock_script {
                inputs.insert("mock_script".into(), file_hash(p)?);
            }
        }
        Ok(())
    }

    // ---- stage bookkeeping ----

    fn begin(&self, stage: Stage, config: Value, inputs: BTreeMap<String, String>) -> Result<(PathBuf, String), PipelineError> {
        let dir = self.stage_dir(stage);
        let fingerprint = sha256_hex(
            serde_json::to_string(&json!({ "stage": stage, "config": config, "inputs": inputs })).expect("json"),
        );
        let record = dir.join("stage.json");
        if record.exists() {
            let prev: StageRecord = read_json(&record).map_err(io_err(&record))?;
            if prev.fingerprint != fingerprint {
                return Err(PipelineError::Conflict { stage: stage.name(), dir });
            }
        }
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok((dir, fingerprint))
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &self,
        stage: Stage,
        dir: &Path,
        fingerprint: String,
        config: Value,
        inputs: BTreeMap<String, String>,
        outputs: &[PathBuf],
        summary: Value,
    ) -> Result<StageRecord, PipelineError> {
        let mut hashes = BTreeMap::new();
        for p in outputs {
            let rel = p.strip_prefix(&self.config.out_dir).unwrap_or(p);
            hashes.insert(rel.display().to_string(), file_hash(p)?);
        }
        let record = StageRecord { stage, fingerprint, config, inputs, outputs: hashes, summary };
        let path = dir.join("stage.json");
        write_json(&path, &record).map_err(io_err(&path))?;
        Ok(record)
    }

    // ---- stages ----

    pub fn build_index(&self) -> Result<StageRecord, PipelineError> {
        let train = self.load_train()?;
        let config = json!({ "embedder": self.config.embedder });
        let inputs = BTreeMap::from([("train_corpus".to_string(), train.content_hash())]);
        let (dir, fp) = self.begin(Stage::BuildIndex, config.clone(), inputs.clone())?;
        let emb = self.embedder();
        let path = self.index_path();
        let (index, stats) = build_index(&train, &emb, Some(&path))?;
        let summary = json!({
            "examples": stats.examples,
            "new_embeddings": stats.new_embeddings,
            "model_id": index.model_id,
            "dim": index.dim(),
        });
        let outputs = [path.clone(), crate::store::manifest_path(&path)];
        self.finish(Stage::BuildIndex, &dir, fp, config, inputs, &outputs, summary)
    }

    pub fn extract_hints(&self) -> Result<StageRecord, PipelineError> {
        let train = self.load_train()?;
        let test = self.load_test()?;
        let index = self.load_train_index(&train)?;
        let config = json!({ "embedder": self.config.embedder, "llm": self.llm_snapshot(), "hints": self.config.hints });
        let mut inputs = BTreeMap::from([
            ("train_corpus".to_string(), train.content_hash()),
            ("test_corpus".to_string(), test.content_hash()),
            ("index".to_string(), file_hash(&self.index_path())?),
        ]);
        self.script_inputs(&mut inputs)?;
        let (dir, fp) = self.begin(Stage::ExtractHints, config.clone(), inputs.clone())?;

        let emb = self.warm_embedder()?;
        let retriever = Retriever::base(index);
        let llm = self.llm(Stage::ExtractHints)?;
        let settings = self.settings();
        let k = self.config.hints.k;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.llm.concurrency)
            .build()
            .expect("thread pool");
        let results: Vec<Result<Hint, String>> = pool.install(|| {
            test.examples
                .par_iter()
                .map(|q| {
                    let items = retrieve_demonstrations(&retriever, &emb, &train, q, k)?;
                    let set = ExampleSet::new(q.id.clone(), items);
                    extract_hint(llm.as_ref(), &settings, &q.id, &q.question, &set).map_err(|e| e.to_string())
                })
                .collect()
        });
        let mut hints = Vec::new();
        let mut failures = Vec::new();
        for (q, r) in test.examples.iter().zip(results) {
            match r {
                Ok(h) => hints.push(h),
                Err(e) => failures.push(json!({ "query_id": q.id, "error": e })),
            }
        }
        let hints_path = dir.join("hints.jsonl");
        let failures_path = dir.join("failures.jsonl");
        write_jsonl(&hints_path, &hints).map_err(io_err(&hints_path))?;
        write_jsonl(&failures_path, &failures).map_err(io_err(&failures_path))?;

        let none = hints.iter().filter(|h| h.none_flag).count();
        let informative: Vec<f64> = hints
            .iter()
            .filter(|h| !h.none_flag)
            .map(|h| h.source_attribution.iter().map(|a| a.overlap_f1).fold(0.0, f64::max))
            .collect();
        let summary = json!({
            "queries": test.len(),
            "hints": hints.len(),
            "failures": failures.len(),
            "none_rate": if hints.is_empty() { 0.0 } else { none as f64 / hints.len() as f64 },
            "mean_attribution": if informative.is_empty() { 0.0 } else { informative.iter().sum::<f64>() / informative.len() as f64 },
            "rank_histogram": rank_histogram(&hints, self.config.hints.attribution_threshold),
        });
        self.finish(Stage::ExtractHints, &dir, fp, config, inputs, &[hints_path, failures_path], summary)
    }

    fn triplet_queries(&self, train: &Corpus, seed: u64) -> Vec<QAExample> {
        match self.config.hints.triplet_queries {
            Some(n) if n < train.len() => {
                let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(seed), train.len(), n).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| train.examples[i].clone()).collect()
            }
            _ => train.examples.clone(),
        }
    }

    pub fn build_triplets(&self) -> Result<StageRecord, PipelineError> {
        let train = self.load_train()?;
        let index = self.load_train_index(&train)?;
        let tc = self.config.train_config();
        let config = json!({
            "embedder": self.config.embedder,
            "llm": self.llm_snapshot(),
            "hints": self.config.hints,
            "tau_pos": tc.tau_pos,
            "tau_neg": tc.tau_neg,
            "seed": tc.seed,
        });
        let mut inputs = BTreeMap::from([
            ("train_corpus".to_string(), train.content_hash()),
            ("index".to_string(), file_hash(&self.index_path())?),
        ]);
        self.script_inputs(&mut inputs)?;
        let (dir, fp) = self.begin(Stage::BuildTriplets, config.clone(), inputs.clone())?;

        let emb = self.warm_embedder()?;
        let retriever = Retriever::base(index);
        let llm = self.llm(Stage::BuildTriplets)?;
        let queries = self.triplet_queries(&train, tc.seed);
        let build = build_triplets(
            &queries,
            &train,
            &retriever,
            &emb,
            llm.as_ref(),
            &self.settings(),
            self.config.hints.k,
            tc.tau_pos,
            tc.tau_neg,
            tc.seed,
            self.config.llm.concurrency,
        );
        let tpath = dir.join("triplets.jsonl");
        let hpath = dir.join("hints.jsonl");
        let spath = dir.join("skipped.jsonl");
        write_triplets(&tpath, &build.triplets).map_err(io_err(&tpath))?;
        write_jsonl(&hpath, &build.hints).map_err(io_err(&hpath))?;
        write_jsonl(&spath, &build.skipped).map_err(io_err(&spath))?;
        let mut reasons: BTreeMap<&str, usize> = BTreeMap::new();
        for s in &build.skipped {
            let r = match s.reason {
                SkipReason::NoneHint => "none_hint",
                SkipReason::NoPositive => "no_positive",
                SkipReason::NoNegative => "no_negative",
                SkipReason::Failed(_) => "failed",
            };
            *reasons.entry(r).or_default() += 1;
        }
        let summary = json!({
            "queries": queries.len(),
            "triplets": build.triplets.len(),
            "skipped": reasons,
        });
        self.finish(Stage::BuildTriplets, &dir, fp, config, inputs, &[tpath, hpath, spath], summary)
    }

    /// Uses only the persisted vector cache: no embedding or LLM calls.
    pub fn train_her(&self) -> Result<StageRecord, PipelineError> {
        let train_corpus = self.load_train()?;
        let index = self.load_train_index(&train_corpus)?;
        let tpath = self.require(self.out("triplets/triplets.jsonl"), Stage::BuildTriplets)?;
        let tc = self.config.train_config();
        let config = json!({ "her": tc });
        let inputs = BTreeMap::from([
            ("index".to_string(), file_hash(&self.index_path())?),
            ("triplets".to_string(), file_hash(&tpath)?),
        ]);
        let (dir, fp) = self.begin(Stage::TrainHer, config.clone(), inputs.clone())?;

        let triplets = read_triplets(&tpath).map_err(io_err(&tpath))?;
        let pos: HashMap<&str, usize> = index.ids().iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let vec_of = |id: &str| {
            pos.get(id)
                .map(|&i| index.vector(i).clone())
                .ok_or_else(|| PipelineError::Mismatch(format!("triplet example {id:?} is not in the index")))
        };
        let embedded = triplets
            .iter()
            .map(|t| {
                Ok(EmbeddedTriplet {
                    query: vec_of(&t.query_id)?,
                    positive: vec_of(&t.positive.id)?,
                    negative: vec_of(&t.negative.id)?,
                })
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        if embedded.len() < tc.batch_size {
            return Err(TrainError::InsufficientData(format!(
                "{} triplets, batch size is {}",
                embedded.len(),
                tc.batch_size
            ))
            .into());
        }
        let outcome = train(&tc, &embedded, &index.model_id)?;
        let cpath = self.checkpoint_path();
        write_checkpoint(&cpath, &outcome.best, &outcome.history)?;
        let h = &outcome.history;
        let summary = json!({
            "triplets": embedded.len(),
            "n_train": h.n_train,
            "n_validation": h.n_validation,
            "baseline": h.baseline,
            "best_epoch": h.best_epoch,
            "best": h.best,
        });
        let outputs = [cpath.clone(), crate::her_train::history_path(&cpath)];
        self.finish(Stage::TrainHer, &dir, fp, config, inputs, &outputs, summary)
    }

    fn run_key(cfg: &ExperimentConfig) -> String {
        let retriever = match cfg.retriever {
            RetrieverKind::Base => "base",
            RetrieverKind::Her => "her",
        };
        let order = cfg.ordering.to_string().replace(':', "");
        format!("{retriever}-{}-k{}-{order}", cfg.method, cfg.effective_shots())
    }

    /// The runs of the eval plan, grouped by table, deduplicated by key.
    pub fn planned_runs(&self) -> (EvalPlanIndex, BTreeMap<String, ExperimentConfig>) {
        let plan = &self.config.eval;
        let template = ExperimentConfig {
            seeds: self.config.experiment_seeds(),
            concurrency: self.config.llm.concurrency,
            ..self.config.experiment.clone()
        };
        let first = plan.retrievers.first().copied().unwrap_or_default();
        let mut runs = BTreeMap::new();
        let mut index = EvalPlanIndex::default();
        let mut add = |group: &mut Vec<String>, method: Method, retriever: RetrieverKind, shots: usize, ordering: OrderPolicy| {
            let cfg = ExperimentConfig { method, retriever, shots, ordering, ..template.clone() };
            let key = Self::run_key(&cfg);
            if !group.contains(&key) {
                group.push(key.clone());
            }
            runs.entry(key).or_insert(cfg);
        };
        for &r in &plan.retrievers {
            for &m in &plan.methods {
                add(&mut index.main, m, r, template.shots, template.ordering);
            }
        }
        if plan.orderings.len() >= 2 {
            for &m in &plan.ordering_methods {
                for &o in &plan.orderings {
                    add(&mut index.order, m, first, template.shots, o);
                }
            }
        }
        for &m in &plan.shot_methods {
            for &k in &plan.shot_sweep {
                add(&mut index.shots, m, first, k, template.ordering);
            }
        }
        (index, runs)
    }

    pub fn eval(&self) -> Result<StageRecord, PipelineError> {
        let train = self.load_train()?;
        let test = self.load_test()?;
        let index = self.load_train_index(&train)?;
        let (plan, runs) = self.planned_runs();
        let uses_her = runs.values().any(|c| c.retriever == RetrieverKind::Her);
        let config = json!({
            "embedder": self.config.embedder,
            "llm": self.llm_snapshot(),
            "experiment": self.config.experiment,
            "experiment_seeds": self.config.experiment_seeds(),
            "eval": self.config.eval,
        });
        let mut inputs = BTreeMap::from([
            ("train_corpus".to_string(), train.content_hash()),
            ("test_corpus".to_string(), test.content_hash()),
            ("index".to_string(), file_hash(&self.index_path())?),
        ]);
        if uses_her {
            let c = self.require(self.checkpoint_path(), Stage::TrainHer)?;
            inputs.insert("checkpoint".into(), file_hash(&c)?);
        }
        self.script_inputs(&mut inputs)?;
        let (dir, fp) = self.begin(Stage::Eval, config.clone(), inputs.clone())?;

        let emb = self.warm_embedder()?;
        let base = Retriever::base(index.clone());
        let her = if uses_her {
            let (ckpt, _) = read_checkpoint(&self.checkpoint_path())?;
            if ckpt.head.base_model_id != index.model_id {
                return Err(PipelineError::Mismatch(format!(
                    "checkpoint was trained on {:?} embeddings but the index holds {:?}",
                    ckpt.head.base_model_id, index.model_id
                )));
            }
            Some(Retriever::her(&index, ckpt.head)?)
        } else {
            None
        };
        let llm = self.llm(Stage::Eval)?;
        let settings = self.settings();
        let runs_dir = dir.join("runs");
        fs::create_dir_all(&runs_dir).map_err(io_err(&runs_dir))?;
        let mut outputs = Vec::new();
        let mut means = BTreeMap::new();
        for (key, cfg) in &runs {
            let retriever = match cfg.retriever {
                RetrieverKind::Base => &base,
                RetrieverKind::Her => her.as_ref().expect("her retriever loaded"),
            };
            let ctx = EvalContext { test: &test, pool: &train, retriever, embedder: &emb, llm: llm.as_ref(), settings: &settings };
            let run = run_experiment(cfg, &ctx)?;
            tracing::info!(run = key.as_str(), em = run.report.mean.em, f1 = run.report.mean.f1, "run done");
            let rp = runs_dir.join(format!("{key}.report.json"));
            let tp = runs_dir.join(format!("{key}.transcripts.jsonl"));
            write_json(&rp, &run.report).map_err(io_err(&rp))?;
            write_transcripts(&tp, &run.transcripts).map_err(io_err(&tp))?;
            means.insert(key.clone(), run.report.mean);
            outputs.push(rp);
            outputs.push(tp);
        }
        let plan_path = dir.join("plan.json");
        write_json(&plan_path, &plan).map_err(io_err(&plan_path))?;
        outputs.push(plan_path);
        let summary = json!({ "runs": runs.len(), "mean": means });
        self.finish(Stage::Eval, &dir, fp, config, inputs, &outputs, summary)
    }

    /// Renders tables from persisted eval artifacts only.
    pub fn report(&self) -> Result<StageRecord, PipelineError> {
        let eval_record = self.require(self.out("eval/stage.json"), Stage::Eval)?;
        let plan_path = self.require(self.out("eval/plan.json"), Stage::Eval)?;
        let inputs = BTreeMap::from([("eval".to_string(), file_hash(&eval_record)?)]);
        let config = json!({});
        let (dir, fp) = self.begin(Stage::Report, config.clone(), inputs.clone())?;

        let plan: EvalPlanIndex = read_json(&plan_path).map_err(io_err(&plan_path))?;
        let load = |key: &String| -> Result<ExperimentReport, PipelineError> {
            let p = self.out(&format!("eval/runs/{key}.report.json"));
            read_json(&p).map_err(io_err(&p))
        };
        let main = plan.main.iter().map(load).collect::<Result<Vec<_>, _>>()?;
        let order = plan.order.iter().map(load).collect::<Result<Vec<_>, _>>()?;
        let shots = plan.shots.iter().map(load).collect::<Result<Vec<_>, _>>()?;

        let mut rows: Vec<(String, BTreeMap<String, crate::eval::EvalScores>)> = Vec::new();
        for r in &order {
            let label = r.ordering.to_string();
            match rows.iter_mut().find(|(o, _)| *o == label) {
                Some((_, cols)) => {
                    cols.insert(r.method.to_string(), r.mean);
                }
                None => rows.push((label, BTreeMap::from([(r.method.to_string(), r.mean)]))),
            }
        }
        let sensitivity = order_sensitivity(rows);
        let histograms: Vec<(String, RankHistogram)> = main
            .iter()
            .filter(|r| r.method == Method::Hicl)
            .filter_map(|r| r.rank_histogram.clone().map(|h| (r.retriever.clone(), h)))
            .collect();

        let mut summary_txt = String::from("Main results (EM / F1, mean over seeds)\n");
        summary_txt.push_str(&summary_table(&main));
        let order_txt = if order.is_empty() { String::new() } else { order_table(&sensitivity) };
        if !order.is_empty() {
            summary_txt.push_str("\nOrder sensitivity\n");
            summary_txt.push_str(&order_txt);
        }
        let files = [
            (dir.join("summary.txt"), summary_txt),
            (dir.join("order_sensitivity.txt"), order_txt),
            (dir.join("shot_curve.csv"), shot_curve_csv(&shots)),
            (dir.join("rank_histogram.csv"), rank_histogram_csv(&histograms)),
        ];
        for (p, body) in &files {
            fs::write(p, body).map_err(io_err(p))?;
        }
        let json_path = dir.join("report.json");
        let combined = json!({
            "main": main,
            "order_sensitivity": sensitivity,
            "shot_curve": shots.iter().map(|r| json!({ "method": r.method, "retriever": r.retriever, "shots": r.shots, "mean": r.mean })).collect::<Vec<_>>(),
            "rank_histograms": histograms.iter().cloned().collect::<BTreeMap<_, _>>(),
        });
        write_json(&json_path, &combined).map_err(io_err(&json_path))?;
        let mut outputs: Vec<PathBuf> = files.into_iter().map(|(p, _)| p).collect();
        outputs.push(json_path);
        let summary = json!({ "main_runs": main.len(), "order_runs": order.len(), "shot_runs": shots.len() });
        self.finish(Stage::Report, &dir, fp, config, inputs, &outputs, summary)
    }

    /// Every stage in order.
    pub fn run_all(&self) -> Result<Vec<StageRecord>, PipelineError> {
        Stage::ALL.iter().map(|&s| self.run(s)).collect()
    }
}
