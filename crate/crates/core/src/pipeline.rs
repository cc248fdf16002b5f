//! Stage orchestration, run directories and resumption.
//!
//! Run directory layout:
//!
//! | file                  | written by | contents                                   |
//! |-----------------------|------------|--------------------------------------------|
//! | `index.bin`           | index      | BM25 index (unless `paths.index` is set)   |
//! | `tasks.jsonl`         | generate   | accepted instruction/context pairs         |
//! | `records.jsonl`       | respond    | specialization records                     |
//! | `rejected.jsonl`      | respond    | tasks whose response was rejected          |
//! | `records_iter2.jsonl` | iterate    | contrastive second-iteration records       |
//! | `rejected_iter2.jsonl`| iterate    | second-iteration rejections                |
//! | `train.jsonl`         | export     | `{instruction, input, output}` lines       |
//! | `holdout.jsonl`       | export     | held-out lines when `export.holdout > 0`   |
//! | `train.toml`          | export     | trainer config for `specforge-train`       |
//! | `stats.json`, `stats.csv` | stats  | verb/object statistics                     |
//! | `report.json`, `report.txt` | eval | scores and raw predictions                 |
//! | `manifest.json`       | every stage| hashes, counts and timings per stage       |
//!
//! JSON-lines outputs are appended one line at a time, so an interrupted
//! stage resumes from the number of complete lines already on disk. A stage
//! whose manifest entry matches the current config hash and whose input and
//! output files still hash to the recorded digests is skipped as up to date.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Read, Seek, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{BackendHandle, ClientOptions, Endpoint, RemoteOptions, RetryPolicy, Role};
use crate::config::{ConfigError, RunConfig, Stage};
use crate::contrastive::generate_contrastive_response;
use crate::dataset::{export_training_file, export_with_holdout};
use crate::eval::{eval_sampling, load_tasks, run_eval};
use crate::index::{read_corpus, CorpusFormat, IndexBuilder, InvertedIndex};
use crate::instruct::{generate_instructions, GeneratedTask, GenerationStatus};
use crate::respond::{generate_response, RejectedRecord, ResponseOutcome, SpecializationRecord};
use crate::seeds::SeedPool;
use crate::stats::{compute_stats, DEFAULT_TOP_KEYWORDS};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TASKS_FILE: &str = "tasks.jsonl";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const REJECTED_FILE: &str = "rejected.jsonl";
pub const RECORDS_ITER2_FILE: &str = "records_iter2.jsonl";
pub const REJECTED_ITER2_FILE: &str = "rejected_iter2.jsonl";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const HOLDOUT_FILE: &str = "holdout.jsonl";
pub const TRAIN_CONFIG_FILE: &str = "train.toml";
pub const STATS_FILE: &str = "stats.json";
pub const STATS_CSV_FILE: &str = "stats.csv";
pub const REPORT_FILE: &str = "report.json";
pub const REPORT_TEXT_FILE: &str = "report.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Ok = 0,
    Validation = 1,
    Runtime = 2,
    Partial = 3,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration:\n{0}")]
    Config(#[from] ConfigError),
    #[error("{stage} failed: {message}")]
    Stage { stage: Stage, message: String },
}

impl PipelineError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            PipelineError::Config(_) => ExitCode::Validation,
            PipelineError::Stage { .. } => ExitCode::Runtime,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Complete,
    /// Finished with warnings, such as a generation budget running out.
    Partial,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: StageStatus,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub counts: BTreeMap<String, u64>,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub started_unix: u64,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub fn load(run_dir: &Path) -> Manifest {
        let path = run_dir.join(MANIFEST_FILE);
        match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).unwrap_or_else(|e| {
                log::warn!("ignoring unreadable manifest {}: {e}", path.display());
                Manifest::default()
            }),
            Err(_) => Manifest::default(),
        }
    }

    pub fn save(&self, run_dir: &Path) -> io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(io::Error::other)?;
        write_atomic(&run_dir.join(MANIFEST_FILE), format!("{text}\n").as_bytes())
    }

    /// Files whose current digest differs from the one recorded, as
    /// `(stage, file)` pairs.
    pub fn tampered(&self, run_dir: &Path) -> Vec<(String, String)> {
        let mut bad = Vec::new();
        for (stage, rec) in &self.stages {
            for (name, digest) in &rec.outputs {
                if file_digest(&run_dir.join(name)).ok().as_deref() != Some(digest.as_str()) {
                    bad.push((stage.clone(), name.clone()));
                }
            }
        }
        bad
    }
}

pub fn file_digest(path: &Path) -> io::Result<String> {
    let mut file = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)
}

/// Reads a JSON-lines file. A final line without its newline is the trace
/// of an interrupted write; it is cut off the file and ignored.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> io::Result<Vec<T>> {
    let mut file = match OpenOptions::new().read(true).write(true).open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    let mut items = Vec::new();
    let mut good_len = 0u64;
    let mut reader = BufReader::new(&mut file);
    let mut line = String::new();
    let mut line_no = 0;
    loop {
        line.clear();
        let n = reader.read_line(&mut line)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        if !line.ends_with('\n') {
            log::warn!("{}: dropping incomplete final line {line_no}", path.display());
            break;
        }
        if line.trim().is_empty() {
            good_len += n as u64;
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| {
            io::Error::new(io::ErrorKind::InvalidData, format!("{}:{line_no}: {e}", path.display()))
        })?;
        items.push(item);
        good_len += n as u64;
    }
    drop(reader);
    if file.seek(io::SeekFrom::End(0))? != good_len {
        file.set_len(good_len)?;
    }
    Ok(items)
}

/// Appends one JSON object per line, flushing after each.
pub struct JsonlAppender {
    file: File,
    written: u64,
}

impl JsonlAppender {
    pub fn open(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { file, written: 0 })
    }

    pub fn append<T: Serialize>(&mut self, item: &T) -> io::Result<()> {
        let mut line = serde_json::to_vec(item).map_err(io::Error::other)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.flush()?;
        self.written += 1;
        Ok(())
    }

    pub fn written(&self) -> u64 {
        self.written
    }
}

/// Trainer configuration written next to `train.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub train_file: PathBuf,
    pub base_model: String,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub lora_rank: usize,
    pub lora_alpha: usize,
    pub load_in_4bit: bool,
    pub output_dir: PathBuf,
}

impl TrainSpec {
    pub fn from_config(config: &RunConfig) -> Self {
        let t = &config.trainer;
        Self {
            train_file: config.run_dir.join(TRAIN_FILE),
            base_model: t.base_model.clone(),
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            lora_rank: t.lora_rank,
            lora_alpha: t.lora_alpha,
            load_in_4bit: t.load_in_4bit,
            output_dir: config.run_dir.join("adapter"),
        }
    }
}

/// Connected models for a run. The expert and base fall back to the generator.
#[derive(Debug, Clone, Default)]
pub struct Backends {
    pub generator: Option<BackendHandle>,
    pub expert: Option<BackendHandle>,
    pub base: Option<BackendHandle>,
}

impl Backends {
    pub fn connect(config: &RunConfig) -> Result<Self, ConfigError> {
        let b = &config.backends;
        let options = ClientOptions {
            retry: RetryPolicy::new(
                b.retry_attempts,
                std::time::Duration::from_millis(b.retry_backoff_ms),
            ),
            max_in_flight: b.max_in_flight,
            remote: RemoteOptions {
                timeout: std::time::Duration::from_secs(b.timeout_secs),
                ..RemoteOptions::default()
            },
        };
        let connect = |field: &str, spec: &Option<String>, role| -> Result<Option<BackendHandle>, ConfigError> {
            spec.as_deref()
                .map(|s| BackendHandle::connect(s, role, &options))
                .transpose()
                .map_err(|e| {
                    ConfigError(vec![crate::config::Diagnostic {
                        field: field.into(),
                        message: e.to_string(),
                    }])
                })
        };
        Ok(Self {
            generator: connect("backends.generator", &b.generator, Role::Base)?,
            expert: connect("backends.expert", &b.expert, Role::Aligned)?,
            base: connect("backends.base", &b.base, Role::Base)?,
        })
    }

    fn generator(&self, stage: Stage) -> Result<&BackendHandle, PipelineError> {
        self.generator.as_ref().ok_or_else(|| PipelineError::Stage {
            stage,
            message: "no generator backend configured".into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageSummary {
    pub stage: Stage,
    pub up_to_date: bool,
    pub status: StageStatus,
    pub counts: BTreeMap<String, u64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub stages: Vec<StageSummary>,
}

impl RunSummary {
    pub fn exit_code(&self) -> ExitCode {
        if self.stages.iter().any(|s| s.status != StageStatus::Complete) {
            ExitCode::Partial
        } else {
            ExitCode::Ok
        }
    }

    pub fn all_up_to_date(&self) -> bool {
        self.stages.iter().all(|s| s.up_to_date)
    }
}

/// What a stage body reports back.
#[derive(Default)]
struct StageResult {
    counts: BTreeMap<String, u64>,
    warnings: Vec<String>,
}

impl StageResult {
    fn count(&mut self, key: &str, n: impl TryInto<u64>) {
        self.counts.insert(key.into(), n.try_into().unwrap_or(u64::MAX));
    }
}

struct Runner<'a> {
    config: &'a RunConfig,
    backends: &'a Backends,
    manifest: Manifest,
    hash: String,
    index: Option<InvertedIndex>,
}

/// Validates `config`, connects its backends and runs `stage`.
pub fn run_pipeline(config: &RunConfig, stage: Stage) -> Result<RunSummary, PipelineError> {
    config.validate(stage)?;
    let backends = Backends::connect(config)?;
    run_pipeline_with(config, stage, &backends)
}

/// Like [`run_pipeline`] with caller-supplied backends; the generator
/// requirement is checked against `backends` rather than the config.
pub fn run_pipeline_with(
    config: &RunConfig,
    stage: Stage,
    backends: &Backends,
) -> Result<RunSummary, PipelineError> {
    let mut probe = config.clone();
    if backends.generator.is_some() && probe.backends.generator.is_none() {
        probe.backends.generator = Some("http://in-process".into());
    }
    probe.validate(stage)?;

    let io_fail = |e: io::Error| PipelineError::Stage {
        stage,
        message: format!("{}: {e}", config.run_dir.display()),
    };
    fs::create_dir_all(&config.run_dir).map_err(io_fail)?;
    let mut runner = Runner {
        config,
        backends,
        manifest: Manifest::load(&config.run_dir),
        hash: config.hash(),
        index: None,
    };
    runner.manifest.config_hash = runner.hash.clone();

    let stages: Vec<Stage> = match stage {
        Stage::All => Stage::CHAIN.to_vec(),
        s => vec![s],
    };
    let mut summary = RunSummary { stages: Vec::new() };
    for s in stages {
        summary.stages.push(runner.run_stage(s)?);
    }
    Ok(summary)
}

impl Runner<'_> {
    fn dir(&self) -> &Path {
        &self.config.run_dir
    }

    fn inputs(&self, stage: Stage) -> Vec<PathBuf> {
        let c = self.config;
        let mut v: Vec<PathBuf> = Vec::new();
        let run = |name: &str| c.run_dir.join(name);
        match stage {
            Stage::Index => v.extend(c.paths.corpus.clone()),
            Stage::Generate => v.extend(c.paths.seeds.clone()),
            Stage::Respond => v.extend([run(TASKS_FILE), c.index_path()]),
            Stage::Iterate => {
                v.push(run(TASKS_FILE));
                if c.contrast.with_retrieval {
                    v.push(c.index_path());
                }
            }
            Stage::Export => v.push(run(if c.export.iteration == 2 {
                RECORDS_ITER2_FILE
            } else {
                RECORDS_FILE
            })),
            Stage::Stats => v.push(self.stats_source()),
            Stage::Eval => {
                if let Some(p) = &c.paths.eval_tasks {
                    if p.is_dir() {
                        let mut files: Vec<PathBuf> = fs::read_dir(p)
                            .into_iter()
                            .flatten()
                            .filter_map(|e| e.ok().map(|e| e.path()))
                            .filter(|p| p.extension().is_some_and(|x| x == "json"))
                            .collect();
                        files.sort();
                        v.extend(files);
                    } else {
                        v.push(p.clone());
                    }
                }
            }
            Stage::All => {}
        }
        let uses_backend = matches!(stage, Stage::Generate | Stage::Respond | Stage::Iterate | Stage::Eval);
        if uses_backend {
            for spec in [&c.backends.generator, &c.backends.expert, &c.backends.base]
                .into_iter()
                .flatten()
            {
                if let Ok(Endpoint::Mock(p)) = Endpoint::parse(spec) {
                    if !v.contains(&p) {
                        v.push(p);
                    }
                }
            }
        }
        v
    }

    fn outputs(&self, stage: Stage) -> Vec<PathBuf> {
        let run = |name: &str| self.dir().join(name);
        match stage {
            Stage::Index => vec![self.config.index_path()],
            Stage::Generate => vec![run(TASKS_FILE)],
            Stage::Respond => vec![run(RECORDS_FILE), run(REJECTED_FILE)],
            Stage::Iterate => vec![run(RECORDS_ITER2_FILE), run(REJECTED_ITER2_FILE)],
            Stage::Export => {
                let mut v = vec![run(TRAIN_FILE), run(TRAIN_CONFIG_FILE)];
                if self.config.export.holdout > 0.0 {
                    v.push(run(HOLDOUT_FILE));
                }
                v
            }
            Stage::Stats => vec![run(STATS_FILE), run(STATS_CSV_FILE)],
            Stage::Eval => vec![run(REPORT_FILE), run(REPORT_TEXT_FILE)],
            Stage::All => vec![],
        }
    }

    fn stats_source(&self) -> PathBuf {
        let records = self.dir().join(RECORDS_FILE);
        if records.exists() {
            records
        } else {
            self.dir().join(TASKS_FILE)
        }
    }

    /// Manifest keys: run-directory files by name, everything else by path.
    fn key(&self, path: &Path) -> String {
        match path.strip_prefix(self.dir()) {
            Ok(rel) => rel.display().to_string(),
            Err(_) => path.display().to_string(),
        }
    }

    fn digests(&self, paths: &[PathBuf]) -> Option<BTreeMap<String, String>> {
        paths
            .iter()
            .map(|p| file_digest(p).ok().map(|d| (self.key(p), d)))
            .collect()
    }

    fn up_to_date(&self, stage: Stage) -> bool {
        let Some(rec) = self.manifest.stages.get(stage.name()) else {
            return false;
        };
        if rec.status != StageStatus::Complete || rec.config_hash != self.hash {
            return false;
        }
        let (Some(inputs), Some(outputs)) = (
            self.digests(&self.inputs(stage)),
            self.digests(&self.outputs(stage)),
        ) else {
            return false;
        };
        // Outputs named by key in the record must all still match.
        inputs == rec.inputs && outputs == rec.outputs
    }

    fn run_stage(&mut self, stage: Stage) -> Result<StageSummary, PipelineError> {
        if self.up_to_date(stage) {
            log::info!("{stage}: up to date");
            let rec = &self.manifest.stages[stage.name()];
            return Ok(StageSummary {
                stage,
                up_to_date: true,
                status: rec.status,
                counts: rec.counts.clone(),
                warnings: rec.warnings.clone(),
            });
        }
        log::info!("{stage}: running");
        let started_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let clock = Instant::now();
        let input_digests = self.digests(&self.inputs(stage)).unwrap_or_default();
        let result = self.execute(stage);
        let elapsed_ms = clock.elapsed().as_millis() as u64;
        let outputs: Vec<PathBuf> = self.outputs(stage).into_iter().filter(|p| p.exists()).collect();
        let output_digests = self.digests(&outputs).unwrap_or_default();

        let (status, res, error) = match result {
            Ok(res) if res.warnings.is_empty() => (StageStatus::Complete, res, None),
            Ok(res) => (StageStatus::Partial, res, None),
            Err((partial, message)) => (StageStatus::Failed, partial, Some(message)),
        };
        for w in &res.warnings {
            log::warn!("{stage}: {w}");
        }
        let record = StageRecord {
            status,
            config_hash: self.hash.clone(),
            inputs: input_digests,
            outputs: output_digests,
            counts: res.counts.clone(),
            warnings: res.warnings.clone(),
            error: error.clone(),
            started_unix,
            elapsed_ms,
        };
        self.manifest.stages.insert(stage.name().to_string(), record);
        self.manifest.save(self.dir()).map_err(|e| PipelineError::Stage {
            stage,
            message: format!("writing manifest: {e}"),
        })?;
        if let Some(message) = error {
            return Err(PipelineError::Stage { stage, message });
        }
        Ok(StageSummary {
            stage,
            up_to_date: false,
            status,
            counts: res.counts,
            warnings: res.warnings,
        })
    }

    /// On failure, returns whatever counts were reached with the message.
    fn execute(&mut self, stage: Stage) -> Result<StageResult, (StageResult, String)> {
        let mut res = StageResult::default();
        let outcome = match stage {
            Stage::Index => self.stage_index(&mut res),
            Stage::Generate => self.stage_generate(&mut res),
            Stage::Respond => self.stage_respond(&mut res, false),
            Stage::Iterate => self.stage_respond(&mut res, true),
            Stage::Export => self.stage_export(&mut res),
            Stage::Stats => self.stage_stats(&mut res),
            Stage::Eval => self.stage_eval(&mut res),
            Stage::All => unreachable!("expanded by the caller"),
        };
        match outcome {
            Ok(()) => Ok(res),
            Err(message) => Err((res, message)),
        }
    }

    fn stage_index(&mut self, res: &mut StageResult) -> Result<(), String> {
        let out = self.config.index_path();
        let Some(corpus) = &self.config.paths.corpus else {
            // Validation let us through because the index already exists.
            let index = InvertedIndex::load(&out).map_err(|e| e.to_string())?;
            res.count("documents", index.num_docs());
            res.count("terms", index.num_terms());
            self.index = Some(index);
            return Ok(());
        };
        let reader = read_corpus(corpus, CorpusFormat::Auto).map_err(|e| e.to_string())?;
        let mut builder = IndexBuilder::new(self.config.bm25()).map_err(|e| e.to_string())?;
        builder.extend(reader).map_err(|e| e.to_string())?;
        let index = builder.finish().map_err(|e| e.to_string())?;
        if let Some(parent) = out.parent() {
            fs::create_dir_all(parent).map_err(|e| e.to_string())?;
        }
        index.save(&out).map_err(|e| e.to_string())?;
        res.count("documents", index.num_docs());
        res.count("terms", index.num_terms());
        self.index = Some(index);
        Ok(())
    }

    fn load_index(&mut self) -> Result<&InvertedIndex, String> {
        if self.index.is_none() {
            let path = self.config.index_path();
            if !path.exists() {
                self.stage_index(&mut StageResult::default())?;
            } else {
                self.index = Some(InvertedIndex::load(&path).map_err(|e| e.to_string())?);
            }
        }
        Ok(self.index.as_ref().expect("loaded above"))
    }

    fn stage_generate(&mut self, res: &mut StageResult) -> Result<(), String> {
        let backend = self.backends.generator(Stage::Generate).map_err(|e| e.to_string())?;
        let seeds_path = self.config.paths.seeds.as_ref().ok_or("paths.seeds is not set")?;
        let pool = SeedPool::load(seeds_path).map_err(|e| e.to_string())?;
        if pool.len() < self.config.expected_seed_count {
            log::info!(
                "seed pool holds {} seeds; the reference setup uses {}",
                pool.len(),
                self.config.expected_seed_count
            );
        }
        let path = self.dir().join(TASKS_FILE);
        let existing: Vec<GeneratedTask> = read_jsonl(&path).map_err(|e| e.to_string())?;
        if !existing.is_empty() {
            log::info!("resuming generation with {} accepted tasks", existing.len());
        }
        res.count("resumed", existing.len());
        let mut out = JsonlAppender::open(&path).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let config = self.config.generation_config();
        let result = generate_instructions(&pool, backend, &config, &mut rng, existing, &mut |t| out.append(t));
        match result {
            Ok(outcome) => {
                res.count("tasks", outcome.tasks.len());
                res.count("rounds", outcome.rounds);
                if outcome.status == GenerationStatus::BudgetExhausted {
                    res.warnings.push(format!(
                        "round budget exhausted with {} of {} tasks",
                        outcome.tasks.len(),
                        config.target_count
                    ));
                }
                Ok(())
            }
            Err(e) => {
                res.count("checkpoint_tasks", out.written());
                Err(e.to_string())
            }
        }
    }

    /// `iterate = true` runs the contrastive second iteration.
    fn stage_respond(&mut self, res: &mut StageResult, iterate: bool) -> Result<(), String> {
        let stage = if iterate { Stage::Iterate } else { Stage::Respond };
        let (records_name, rejected_name) = if iterate {
            (RECORDS_ITER2_FILE, REJECTED_ITER2_FILE)
        } else {
            (RECORDS_FILE, REJECTED_FILE)
        };
        let tasks: Vec<GeneratedTask> = read_jsonl(&self.dir().join(TASKS_FILE)).map_err(|e| e.to_string())?;
        if tasks.is_empty() {
            return Err(format!("{TASKS_FILE} is empty or missing; run generate first"));
        }
        let needs_index = if iterate {
            self.config.contrast.with_retrieval
        } else {
            self.config.retrieval.enabled
        };
        if needs_index {
            self.load_index()?;
        }
        let index = self.index.as_ref().filter(|_| needs_index);

        let records_path = self.dir().join(records_name);
        let rejected_path = self.dir().join(rejected_name);
        let done_records: Vec<SpecializationRecord> = read_jsonl(&records_path).map_err(|e| e.to_string())?;
        let done_rejected: Vec<RejectedRecord> = read_jsonl(&rejected_path).map_err(|e| e.to_string())?;
        let done = done_records.len() + done_rejected.len();
        if done > tasks.len() {
            return Err(format!(
                "{records_name} and {rejected_name} hold {done} lines for {} tasks; remove them to start over",
                tasks.len()
            ));
        }
        if done > 0 {
            log::info!("{stage}: resuming after {done} of {} tasks", tasks.len());
        }
        let mut records = JsonlAppender::open(&records_path).map_err(|e| e.to_string())?;
        let mut rejected = JsonlAppender::open(&rejected_path).map_err(|e| e.to_string())?;

        let generator = self.backends.generator(stage).map_err(|e| e.to_string())?;
        let expert = self.backends.expert.as_ref().unwrap_or(generator);
        let base = self.backends.base.as_ref().unwrap_or(generator);
        let response_config = self.config.response_config();
        let iteration_config = self.config.iteration_config();

        let mut failure = None;
        for (i, task) in tasks.iter().enumerate().skip(done) {
            let outcome = if iterate {
                generate_contrastive_response(task, index, expert, base, &iteration_config)
            } else {
                generate_response(task, index, generator, &response_config)
            };
            let written = match outcome {
                Ok(ResponseOutcome::Accepted(r)) => records.append(&r),
                Ok(ResponseOutcome::Rejected(r)) => rejected.append(&r),
                Err(e) => {
                    failure = Some(format!("task {i}: {e}"));
                    break;
                }
            };
            written.map_err(|e| e.to_string())?;
        }
        let n_records = done_records.len() as u64 + records.written();
        let n_rejected = done_rejected.len() as u64 + rejected.written();
        res.count("records", n_records);
        res.count("rejected", n_rejected);
        res.count("resumed", done);
        if let Some(message) = failure {
            res.count("checkpoint_tasks", n_records + n_rejected);
            return Err(message);
        }
        if n_rejected > 0 {
            res.warnings.push(format!("{n_rejected} responses rejected"));
        }
        Ok(())
    }

    fn stage_export(&mut self, res: &mut StageResult) -> Result<(), String> {
        let source = self.inputs(Stage::Export).remove(0);
        let records: Vec<SpecializationRecord> = read_jsonl(&source).map_err(|e| e.to_string())?;
        let train = self.dir().join(TRAIN_FILE);
        let summary = if self.config.export.holdout > 0.0 {
            export_with_holdout(&records, &train, self.dir().join(HOLDOUT_FILE), self.config.export.holdout)
        } else {
            export_training_file(&records, &train)
        }
        .map_err(|e| e.to_string())?;
        let spec = toml::to_string(&TrainSpec::from_config(self.config)).map_err(|e| e.to_string())?;
        write_atomic(&self.dir().join(TRAIN_CONFIG_FILE), spec.as_bytes()).map_err(|e| e.to_string())?;
        res.count("records", records.len());
        res.count("exported", summary.written);
        res.count("skipped", summary.skipped);
        res.count("holdout", summary.holdout);
        if summary.skipped > 0 {
            res.warnings.push(format!("{} records skipped", summary.skipped));
        }
        Ok(())
    }

    fn stage_stats(&mut self, res: &mut StageResult) -> Result<(), String> {
        #[derive(Deserialize)]
        struct Pair {
            instruction: String,
            #[serde(default)]
            context: String,
        }
        let source = self.stats_source();
        let items: Vec<Pair> = read_jsonl(&source).map_err(|e| e.to_string())?;
        let report = compute_stats(
            items.iter().map(|p| (p.instruction.as_str(), p.context.as_str())),
            DEFAULT_TOP_KEYWORDS,
        );
        let json = serde_json::to_string_pretty(&report).map_err(|e| e.to_string())?;
        write_atomic(&self.dir().join(STATS_FILE), format!("{json}\n").as_bytes()).map_err(|e| e.to_string())?;
        write_atomic(&self.dir().join(STATS_CSV_FILE), report.pairs_csv().as_bytes()).map_err(|e| e.to_string())?;
        res.count("instructions", report.num_instructions);
        res.count("verbs", report.verbs.len());
        Ok(())
    }

    fn stage_eval(&mut self, res: &mut StageResult) -> Result<(), String> {
        let backend = self.backends.generator(Stage::Eval).map_err(|e| e.to_string())?;
        let path = self.config.paths.eval_tasks.as_ref().ok_or("paths.eval_tasks is not set")?;
        let tasks = load_tasks(path).map_err(|e| e.to_string())?;
        let report = run_eval(&tasks, backend, self.config.eval.k, &eval_sampling(self.config.eval.max_tokens))
            .map_err(|e| e.to_string())?;
        let json = serde_json::to_string_pretty(&report).map_err(|e| e.to_string())?;
        write_atomic(&self.dir().join(REPORT_FILE), format!("{json}\n").as_bytes()).map_err(|e| e.to_string())?;
        write_atomic(&self.dir().join(REPORT_TEXT_FILE), report.render_table().as_bytes())
            .map_err(|e| e.to_string())?;
        res.count("tasks", tasks.len());
        res.count("instances", report.predictions.len());
        res.count("failed", report.predictions.iter().filter(|p| p.error.is_some()).count());
        if !report.incomplete_tasks.is_empty() {
            res.warnings.push(format!("incomplete tasks: {}", report.incomplete_tasks.join(", ")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_drops_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        fs::write(&path, "{\"a\":1}\n{\"a\":2}\n{\"a\":").unwrap();
        let items: Vec<serde_json::Value> = read_jsonl(&path).unwrap();
        assert_eq!(items.len(), 2);
        assert_eq!(fs::read_to_string(&path).unwrap(), "{\"a\":1}\n{\"a\":2}\n");
        let mut app = JsonlAppender::open(&path).unwrap();
        app.append(&serde_json::json!({"a": 3})).unwrap();
        assert_eq!(read_jsonl::<serde_json::Value>(&path).unwrap().len(), 3);
    }

    #[test]
    fn jsonl_missing_file_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_jsonl::<serde_json::Value>(&dir.path().join("nope")).unwrap().is_empty());
    }

    #[test]
    fn jsonl_bad_line_reports_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        fs::write(&path, "{\"a\":1}\nnot json\n").unwrap();
        let err = read_jsonl::<serde_json::Value>(&path).unwrap_err();
        assert!(err.to_string().contains("x.jsonl:2"), "{err}");
    }

    #[test]
    fn manifest_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.txt"), "hello").unwrap();
        let mut m = Manifest::default();
        m.stages.insert(
            "x".into(),
            StageRecord {
                status: StageStatus::Complete,
                config_hash: String::new(),
                inputs: BTreeMap::new(),
                outputs: [("a.txt".to_string(), file_digest(&dir.path().join("a.txt")).unwrap())].into(),
                counts: BTreeMap::new(),
                warnings: vec![],
                error: None,
                started_unix: 0,
                elapsed_ms: 0,
            },
        );
        assert!(m.tampered(dir.path()).is_empty());
        fs::write(dir.path().join("a.txt"), "hellO").unwrap();
        assert_eq!(m.tampered(dir.path()), vec![("x".to_string(), "a.txt".to_string())]);
    }

    #[test]
    fn digest_matches_known_value() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc");
        fs::write(&p, "abc").unwrap();
        assert_eq!(
            file_digest(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
