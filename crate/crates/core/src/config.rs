//! TOML pipeline configuration. Secrets never live here: HTTP providers name
//! the environment variable that holds their token.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{ExperimentConfig, Method, OrderPolicy, RetrieverKind, SHOT_SWEEP};
use crate::her_train::TrainConfig;
use crate::hints::DEFAULT_ATTRIBUTION_THRESHOLD;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    /// Demonstration pool and source of HER training queries.
    pub train: PathBuf,
    /// Evaluation queries.
    pub test: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderConfig {
    #[serde(default)]
    pub kind: ProviderKind,
    /// Required for http; ignored by the mock, whose id derives from dim and seed.
    #[serde(default)]
    pub model_id: Option<String>,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_embed_token_env")]
    pub token_env: String,
    #[serde(default = "default_embed_batch")]
    pub batch_size: usize,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    /// Feature-hashing seed of the mock embedder.
    #[serde(default)]
    pub mock_seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Mock,
            model_id: None,
            dim: default_dim(),
            endpoint: None,
            token_env: default_embed_token_env(),
            batch_size: default_embed_batch(),
            concurrency: default_concurrency(),
            mock_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmConfig {
    #[serde(default)]
    pub kind: ProviderKind,
    #[serde(default = "default_llm_model")]
    pub model_id: String,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_llm_token_env")]
    pub token_env: String,
    /// JSONL rule file for the mock; without one every call answers "None".
    #[serde(default)]
    pub mock_script: Option<PathBuf>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Mock,
            model_id: default_llm_model(),
            endpoint: None,
            token_env: default_llm_token_env(),
            mock_script: None,
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            concurrency: default_concurrency(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HintsConfig {
    /// Examples shown to the hint extractor.
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_threshold")]
    pub attribution_threshold: f64,
    /// Cap on training queries mined for triplets (seeded sample); all when unset.
    #[serde(default)]
    pub triplet_queries: Option<usize>,
}

impl Default for HintsConfig {
    fn default() -> Self {
        Self {
            k: default_k(),
            attribution_threshold: default_threshold(),
            triplet_queries: None,
        }
    }
}

/// Which runs the eval stage performs on top of the `[experiment]` template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalPlan {
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_retrievers")]
    pub retrievers: Vec<RetrieverKind>,
    /// Orderings for the order-sensitivity table; empty disables it.
    #[serde(default = "default_orderings")]
    pub orderings: Vec<OrderPolicy>,
    #[serde(default = "default_compare_methods")]
    pub ordering_methods: Vec<Method>,
    /// Shot counts for the shot curve; empty disables it.
    #[serde(default = "default_shot_sweep")]
    pub shot_sweep: Vec<usize>,
    #[serde(default = "default_compare_methods")]
    pub shot_methods: Vec<Method>,
}

impl Default for EvalPlan {
    fn default() -> Self {
        Self {
            methods: default_methods(),
            retrievers: default_retrievers(),
            orderings: default_orderings(),
            ordering_methods: default_compare_methods(),
            shot_sweep: default_shot_sweep(),
            shot_methods: default_compare_methods(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Offsets experiment seeds and seeds triplet sampling and HER training.
    #[serde(default)]
    pub seed: u64,
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub embedder: EmbedderConfig,
    #[serde(default)]
    pub llm: LlmConfig,
    #[serde(default)]
    pub hints: HintsConfig,
    #[serde(default)]
    pub her: TrainConfig,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    #[serde(default)]
    pub eval: EvalPlan,
}

fn default_dim() -> usize {
    64
}
fn default_embed_token_env() -> String {
    "HICL_EMBEDDER_TOKEN".into()
}
fn default_llm_token_env() -> String {
    "HICL_LLM_TOKEN".into()
}
fn default_embed_batch() -> usize {
    64
}
fn default_concurrency() -> usize {
    4
}
fn default_llm_model() -> String {
    "mock-chat".into()
}
fn default_max_tokens() -> u32 {
    256
}
fn default_k() -> usize {
    5
}
fn default_threshold() -> f64 {
    DEFAULT_ATTRIBUTION_THRESHOLD
}
fn default_methods() -> Vec<Method> {
    vec![Method::ZeroShot, Method::StandardIcl, Method::Recite, Method::Hicl]
}
fn default_retrievers() -> Vec<RetrieverKind> {
    vec![RetrieverKind::Base]
}
fn default_orderings() -> Vec<OrderPolicy> {
    vec![OrderPolicy::Default, OrderPolicy::Reverse, OrderPolicy::Random(1), OrderPolicy::Random(2)]
}
fn default_compare_methods() -> Vec<Method> {
    vec![Method::StandardIcl, Method::Hicl]
}
fn default_shot_sweep() -> Vec<usize> {
    SHOT_SWEEP.to_vec()
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl PipelineConfig {
    /// Reads a TOML file. Relative corpus and script paths resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse { path: path.to_path_buf(), message },
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.corpus.train);
        resolve(&mut cfg.corpus.test);
        resolve(&mut cfg.out_dir);
        if let Some(s) = cfg.llm.mock_script.as_mut() {
            resolve(s);
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::from("<inline>"),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.embedder.dim == 0 {
            return bad("embedder.dim must be positive".into());
        }
        if self.embedder.kind == ProviderKind::Http && (self.embedder.endpoint.is_none() || self.embedder.model_id.is_none()) {
            return bad("http embedder needs endpoint and model_id".into());
        }
        if self.llm.kind == ProviderKind::Http && self.llm.endpoint.is_none() {
            return bad("http llm needs an endpoint".into());
        }
        if self.hints.k == 0 {
            return bad("hints.k must be positive".into());
        }
        if self.llm.concurrency == 0 || self.embedder.concurrency == 0 || self.embedder.batch_size == 0 {
            return bad("concurrency and batch sizes must be positive".into());
        }
        self.her.validate().or_else(|e| bad(e.to_string()))?;
        self.experiment.validate().or_else(|e| bad(e.to_string()))?;
        if self.eval.shot_sweep.contains(&0) {
            return bad("eval.shot_sweep entries must be positive".into());
        }
        Ok(())
    }

    /// Experiment seeds shifted by the global seed.
    pub fn experiment_seeds(&self) -> Vec<u64> {
        self.experiment.seeds.iter().map(|s| s.wrapping_add(self.seed)).collect()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.her.seed.wrapping_add(self.seed),
            ..self.her.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[corpus]
train = "train.jsonl"
test = "test.jsonl"
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = PipelineConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.embedder.kind, ProviderKind::Mock);
        assert_eq!(c.her.batch_size, 32);
        assert_eq!(c.experiment.n_queries, 300);
        assert_eq!(c.experiment.seeds.len(), 5);
        assert_eq!(c.eval.shot_sweep, [2, 5, 10, 15]);
        assert_eq!(c.hints.attribution_threshold, 0.3);
    }

    #[test]
    fn round_trips_through_toml() {
        let text = format!(
            "seed = 7\n{MINIMAL}\n[hints]\ntriplet_queries = 50\n[her]\nlearning_rate = 0.01\n[experiment]\nmethod = \"standard_icl\"\nordering = \"random:3\"\n[eval]\nretrievers = [\"base\", \"her\"]\n"
        );
        let c = PipelineConfig::from_toml(&text).unwrap();
        assert_eq!(c.her.learning_rate, 0.01);
        assert_eq!(c.hints.triplet_queries, Some(50));
        assert_eq!(c.experiment.ordering, OrderPolicy::Random(3));
        assert_eq!(c.experiment_seeds(), [7, 8, 9, 10, 11]);
        assert_eq!(c.train_config().seed, 7);
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(PipelineConfig::from_toml("").is_err());
        assert!(PipelineConfig::from_toml(&format!("{MINIMAL}\n[llm]\nkind = \"http\"\n")).is_err());
        assert!(PipelineConfig::from_toml(&format!("{MINIMAL}\n[llm]\napi_key = \"x\"\n")).is_err());
        assert!(PipelineConfig::from_toml(&format!("{MINIMAL}\n[her]\ntau_pos = 0.05\n")).is_err());
        assert!(PipelineConfig::from_toml(&format!("{MINIMAL}\n[experiment]\nseeds = [1, 1]\n")).is_err());
    }

    #[test]
    fn relative_paths_resolve_against_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("hicl.toml");
        std::fs::write(&p, MINIMAL).unwrap();
        let c = PipelineConfig::load(&p).unwrap();
        assert_eq!(c.corpus.train, dir.path().join("train.jsonl"));
        assert_eq!(c.out_dir, dir.path().join("out"));
    }
}
