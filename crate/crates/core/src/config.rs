//! Run configuration.
//!
//! A run is described by one TOML file. Every block is optional and falls
//! back to the defaults below; relative paths resolve against the directory
//! holding the config file. Command-line flags are applied on top before
//! validation.
//!
//! ```toml
//! domain_name = "biomedical"
//! seed = 42
//! run_dir = "runs/demo"
//!
//! [paths]
//! seeds = "seeds.jsonl"
//! corpus = "corpus.jsonl"
//!
//! [backends]
//! generator = "mock:mock.json"
//!
//! [generation]
//! target_count = 20
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::SamplingParams;
use crate::contrastive::{ContrastMode, ContrastParams, IterationConfig};
use crate::decode::{DecodeParams, DEFAULT_END_TOKEN};
use crate::eval::DEFAULT_EVAL_MAX_TOKENS;
use crate::index::{Bm25Params, DEFAULT_QUERY_TERM_BUDGET, DEFAULT_TOP_K};
use crate::instruct::{GenerationConfig, DEFAULT_DEDUP_THRESHOLD, DEFAULT_DEMOS_PER_PROMPT, DEFAULT_DOMAIN, DEFAULT_TARGET_COUNT};
use crate::respond::{ResponseConfig, DEFAULT_REFERENCE_CHAR_BUDGET};

pub const DEFAULT_RUN_DIR: &str = "run";
pub const DEFAULT_RNG_SEED: u64 = 42;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub Vec<Diagnostic>);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

impl ConfigError {
    fn single(field: &str, message: impl Into<String>) -> Self {
        Self(vec![Diagnostic {
            field: field.into(),
            message: message.into(),
        }])
    }

    pub fn fields(&self) -> Vec<&str> {
        self.0.iter().map(|d| d.field.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub seeds: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    /// Where the index is written and read; defaults to `<run_dir>/index.bin`.
    pub index: Option<PathBuf>,
    pub eval_tasks: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendsConfig {
    pub generator: Option<String>,
    /// Aligned model for the contrastive iteration; defaults to `generator`.
    pub expert: Option<String>,
    /// Base model for the contrastive iteration; defaults to `generator`.
    pub base: Option<String>,
    pub max_in_flight: usize,
    pub retry_attempts: usize,
    pub retry_backoff_ms: u64,
    pub timeout_secs: u64,
}

impl BackendsConfig {
    fn defaults() -> Self {
        Self {
            generator: None,
            expert: None,
            base: None,
            max_in_flight: crate::backend::DEFAULT_MAX_IN_FLIGHT,
            retry_attempts: 3,
            retry_backoff_ms: 1000,
            timeout_secs: 120,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationBlock {
    pub target_count: usize,
    pub demos_per_prompt: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: usize,
    pub dedup_threshold: f64,
    pub max_rounds: Option<usize>,
    pub concurrency: usize,
}

impl Default for GenerationBlock {
    fn default() -> Self {
        let g = GenerationConfig::default();
        Self {
            target_count: DEFAULT_TARGET_COUNT,
            demos_per_prompt: DEFAULT_DEMOS_PER_PROMPT,
            temperature: g.sampling.temperature,
            top_p: g.sampling.top_p,
            max_tokens: g.sampling.max_tokens,
            dedup_threshold: DEFAULT_DEDUP_THRESHOLD,
            max_rounds: None,
            concurrency: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalBlock {
    pub enabled: bool,
    pub k1: f64,
    pub b: f64,
    pub top_k: usize,
    pub query_term_budget: usize,
    pub reference_char_budget: usize,
}

impl Default for RetrievalBlock {
    fn default() -> Self {
        let p = Bm25Params::default();
        Self {
            enabled: true,
            k1: p.k1,
            b: p.b,
            top_k: DEFAULT_TOP_K,
            query_term_budget: DEFAULT_QUERY_TERM_BUDGET,
            reference_char_budget: DEFAULT_REFERENCE_CHAR_BUDGET,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeBlock {
    pub max_steps: usize,
    pub stop_sequences: Vec<String>,
    pub greedy: bool,
    pub fallback_to_sampling: bool,
}

impl Default for DecodeBlock {
    fn default() -> Self {
        let d = DecodeParams::default();
        Self {
            max_steps: d.max_steps,
            stop_sequences: vec![DEFAULT_END_TOKEN.into()],
            greedy: d.greedy,
            fallback_to_sampling: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastBlock {
    pub plausibility_alpha: f64,
    pub mode: ContrastMode,
    pub with_retrieval: bool,
}

impl Default for ContrastBlock {
    fn default() -> Self {
        let c = ContrastParams::default();
        Self {
            plausibility_alpha: c.plausibility_alpha,
            mode: c.mode,
            with_retrieval: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalBlock {
    pub k: usize,
    pub max_tokens: usize,
}

impl Default for EvalBlock {
    fn default() -> Self {
        Self {
            k: 5,
            max_tokens: DEFAULT_EVAL_MAX_TOKENS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportBlock {
    /// Fraction of exported records moved to `holdout.jsonl`.
    pub holdout: f64,
    /// 1 exports `records.jsonl`, 2 exports the contrastive `records_iter2.jsonl`.
    pub iteration: u32,
}

impl Default for ExportBlock {
    fn default() -> Self {
        Self {
            holdout: 0.0,
            iteration: 1,
        }
    }
}

/// Hyperparameters handed to `specforge-train` via `train.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerBlock {
    pub base_model: String,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub lora_rank: usize,
    pub lora_alpha: usize,
    pub load_in_4bit: bool,
}

impl Default for TrainerBlock {
    fn default() -> Self {
        Self {
            base_model: "mosaicml/mpt-30b".into(),
            batch_size: 32,
            learning_rate: 3e-4,
            epochs: 3,
            lora_rank: 8,
            lora_alpha: 16,
            load_in_4bit: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub domain_name: String,
    pub seed: u64,
    pub run_dir: PathBuf,
    /// Seed pool size the run expects; a smaller pool only warns.
    pub expected_seed_count: usize,
    pub paths: PathsConfig,
    pub backends: BackendsConfig,
    pub generation: GenerationBlock,
    pub retrieval: RetrievalBlock,
    pub decode: DecodeBlock,
    pub contrast: ContrastBlock,
    pub eval: EvalBlock,
    pub export: ExportBlock,
    pub trainer: TrainerBlock,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            domain_name: DEFAULT_DOMAIN.into(),
            seed: DEFAULT_RNG_SEED,
            run_dir: PathBuf::from(DEFAULT_RUN_DIR),
            expected_seed_count: crate::seeds::DEFAULT_SEED_POOL_SIZE,
            paths: PathsConfig::default(),
            backends: BackendsConfig::defaults(),
            generation: GenerationBlock::default(),
            retrieval: RetrievalBlock::default(),
            decode: DecodeBlock::default(),
            contrast: ContrastBlock::default(),
            eval: EvalBlock::default(),
            export: ExportBlock::default(),
            trainer: TrainerBlock::default(),
        }
    }
}

impl Default for BackendsConfig {
    fn default() -> Self {
        Self::defaults()
    }
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn rebase_endpoint(base: &Path, spec: &mut String) {
    if let Some(rest) = spec.strip_prefix("mock:") {
        let p = Path::new(rest);
        if p.is_relative() {
            *spec = format!("mock:{}", base.join(p).display());
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::single("<config>", e.to_string()))
    }

    /// Parses `path` and resolves relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError::single("--config", format!("{}: {e}", path.display())))?;
        let mut config = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_relative_to(base);
        Ok(config)
    }

    pub fn resolve_relative_to(&mut self, base: &Path) {
        rebase(base, &mut self.run_dir);
        for p in [
            &mut self.paths.seeds,
            &mut self.paths.corpus,
            &mut self.paths.index,
            &mut self.paths.eval_tasks,
        ]
        .into_iter()
        .flatten()
        {
            rebase(base, p);
        }
        for spec in [
            &mut self.backends.generator,
            &mut self.backends.expert,
            &mut self.backends.base,
        ]
        .into_iter()
        .flatten()
        {
            rebase_endpoint(base, spec);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn index_path(&self) -> PathBuf {
        self.paths
            .index
            .clone()
            .unwrap_or_else(|| self.run_dir.join("index.bin"))
    }

    pub fn bm25(&self) -> Bm25Params {
        Bm25Params {
            k1: self.retrieval.k1,
            b: self.retrieval.b,
        }
    }

    pub fn generation_config(&self) -> GenerationConfig {
        let g = &self.generation;
        GenerationConfig {
            target_count: g.target_count,
            demos_per_prompt: g.demos_per_prompt,
            sampling: SamplingParams {
                temperature: g.temperature,
                top_p: g.top_p,
                max_tokens: g.max_tokens,
                ..SamplingParams::default()
            },
            dedup_threshold: g.dedup_threshold,
            max_rounds: g.max_rounds,
            domain_name: self.domain_name.clone(),
            iteration: 1,
            concurrency: g.concurrency,
        }
    }

    pub fn response_config(&self) -> ResponseConfig {
        let r = &self.retrieval;
        ResponseConfig {
            top_k: r.top_k,
            decode: DecodeParams {
                max_steps: self.decode.max_steps,
                stop_sequences: self.decode.stop_sequences.clone(),
                greedy: self.decode.greedy,
                sample_seed: self.seed,
            },
            domain_name: self.domain_name.clone(),
            reference_char_budget: r.reference_char_budget,
            query_term_budget: r.query_term_budget,
            use_retrieval: r.enabled,
            fallback_to_sampling: self.decode.fallback_to_sampling,
            iteration: 1,
        }
    }

    pub fn iteration_config(&self) -> IterationConfig {
        IterationConfig {
            contrast: ContrastParams {
                plausibility_alpha: self.contrast.plausibility_alpha,
                mode: self.contrast.mode,
            },
            with_retrieval: self.contrast.with_retrieval,
            response: ResponseConfig {
                iteration: 2,
                ..self.response_config()
            },
        }
    }

    /// Checks parameter blocks and the paths `stage` reads. Collects every
    /// problem instead of stopping at the first.
    pub fn validate(&self, stage: Stage) -> Result<(), ConfigError> {
        let mut diags = Vec::new();
        let mut push = |field: &str, message: String| {
            diags.push(Diagnostic {
                field: field.into(),
                message,
            })
        };

        if self.domain_name.trim().is_empty() {
            push("domain_name", "must not be empty".into());
        }
        if let Err(e) = self.generation_config().validate() {
            push("generation", e);
        }
        if let Err(e) = self.bm25().validate() {
            push("retrieval", e.to_string());
        }
        if let Err(e) = self.response_config().validate() {
            push("retrieval/decode", e);
        }
        if let Err(e) = self.iteration_config().contrast.validate() {
            push("contrast.plausibility_alpha", e);
        }
        if self.backends.max_in_flight == 0 {
            push("backends.max_in_flight", "must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.export.holdout) {
            push("export.holdout", format!("must be in [0, 1), got {}", self.export.holdout));
        }
        if !(1..=2).contains(&self.export.iteration) {
            push("export.iteration", format!("must be 1 or 2, got {}", self.export.iteration));
        }
        let t = &self.trainer;
        if t.batch_size == 0 || t.epochs == 0 || t.lora_rank == 0 {
            push("trainer", "batch_size, epochs and lora_rank must be at least 1".into());
        }
        if !(t.learning_rate.is_finite() && t.learning_rate > 0.0) {
            push("trainer.learning_rate", "must be > 0".into());
        }

        let mut need_file = |field: &str, p: &Option<PathBuf>| match p {
            None => push(field, "required for this stage".into()),
            Some(p) if !p.exists() => push(field, format!("{} does not exist", p.display())),
            Some(_) => {}
        };
        let needs = stage.reads();
        if needs.seeds {
            need_file("paths.seeds", &self.paths.seeds);
        }
        if needs.corpus && !self.index_path().exists() {
            need_file("paths.corpus", &self.paths.corpus);
        }
        if needs.eval_tasks {
            need_file("paths.eval_tasks", &self.paths.eval_tasks);
        }
        if needs.generator && self.backends.generator.is_none() {
            push(
                "backends.generator",
                "required for this stage (or set SPECFORGE_BACKEND_URL / --backend)".into(),
            );
        }
        for (field, spec) in [
            ("backends.generator", &self.backends.generator),
            ("backends.expert", &self.backends.expert),
            ("backends.base", &self.backends.base),
        ] {
            if let Some(spec) = spec {
                match crate::backend::Endpoint::parse(spec) {
                    Err(e) => push(field, e.to_string()),
                    Ok(crate::backend::Endpoint::Mock(p)) if !p.exists() => {
                        push(field, format!("mock script {} does not exist", p.display()))
                    }
                    Ok(_) => {}
                }
            }
        }

        if diags.is_empty() {
            Ok(())
        } else {
            Err(ConfigError(diags))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Index,
    Generate,
    Respond,
    Iterate,
    Export,
    Stats,
    Eval,
    All,
}

#[derive(Debug, Clone, Copy, Default)]
struct Reads {
    seeds: bool,
    corpus: bool,
    eval_tasks: bool,
    generator: bool,
}

impl Stage {
    pub const CHAIN: [Stage; 4] = [Stage::Index, Stage::Generate, Stage::Respond, Stage::Export];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Index => "index",
            Stage::Generate => "generate",
            Stage::Respond => "respond",
            Stage::Iterate => "iterate",
            Stage::Export => "export",
            Stage::Stats => "stats",
            Stage::Eval => "eval",
            Stage::All => "all",
        }
    }

    fn reads(self) -> Reads {
        let r = Reads::default();
        match self {
            Stage::Index => Reads { corpus: true, ..r },
            Stage::Generate => Reads {
                seeds: true,
                generator: true,
                ..r
            },
            Stage::Respond | Stage::Iterate => Reads {
                corpus: true,
                generator: true,
                ..r
            },
            Stage::Eval => Reads {
                eval_tasks: true,
                generator: true,
                ..r
            },
            Stage::Export | Stage::Stats => r,
            Stage::All => Reads {
                seeds: true,
                corpus: true,
                generator: true,
                ..r
            },
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            Stage::Index,
            Stage::Generate,
            Stage::Respond,
            Stage::Iterate,
            Stage::Export,
            Stage::Stats,
            Stage::Eval,
            Stage::All,
        ]
        .into_iter()
        .find(|st| st.name() == s)
        .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_toml_is_default() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.paths.seeds = Some("s.jsonl".into());
        c.backends.generator = Some("mock:m.json".into());
        c.generation.max_rounds = Some(7);
        c.contrast.mode = ContrastMode::ProbDiff;
        assert_eq!(RunConfig::from_toml_str(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_field_rejected() {
        let err = RunConfig::from_toml_str("[generation]\ntarget = 3\n").unwrap_err();
        assert!(err.to_string().contains("target"), "{err}");
    }

    #[test]
    fn missing_seeds_named() {
        let mut c = RunConfig::default();
        c.paths.seeds = Some("/definitely/not/here.jsonl".into());
        c.backends.generator = Some("http://localhost:1".into());
        let err = c.validate(Stage::Generate).unwrap_err();
        assert_eq!(err.fields(), vec!["paths.seeds"]);
    }

    #[test]
    fn diagnostics_accumulate() {
        let mut c = RunConfig::default();
        c.generation.top_p = 1.5;
        c.contrast.plausibility_alpha = 0.0;
        c.trainer.learning_rate = 0.0;
        let fields = c.validate(Stage::Export).unwrap_err().fields().join(",");
        assert_eq!(fields, "generation,contrast.plausibility_alpha,trainer.learning_rate");
    }

    #[test]
    fn relative_paths_follow_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "run_dir = \"out\"\n[paths]\nseeds = \"s.jsonl\"\n[backends]\ngenerator = \"mock:m.json\"\n").unwrap();
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.run_dir, dir.path().join("out"));
        assert_eq!(c.paths.seeds, Some(dir.path().join("s.jsonl")));
        assert_eq!(c.backends.generator, Some(format!("mock:{}", dir.path().join("m.json").display())));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn stage_names_parse() {
        for s in ["index", "generate", "respond", "iterate", "export", "stats", "eval", "all"] {
            assert_eq!(s.parse::<Stage>().unwrap().name(), s);
        }
        assert!("train".parse::<Stage>().is_err());
    }
}
