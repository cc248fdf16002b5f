//! Domain instruction generation: prompt the generator with a few seed
//! demonstrations, parse the numbered `(instruction, input)` blocks it
//! continues with, and keep the ones that are not near-duplicates.
//!
//! Block grammar, as rendered into prompts and accepted from replies:
//!
//! ```text
//! <n>. Instruction: <instruction text, may span lines>
//! Input: <context text, may span lines, or <noinput>>
//! <blank line>
//! ```
//!
//! A block starts at a line `<n>. Instruction:`; the reply's first block may
//! omit the number because the prompt ends with the numeric cue. A block runs
//! until the next block start. The final block only counts if the reply ends
//! with a blank line, otherwise it is treated as cut off by the token limit.

use std::io;
use std::sync::LazyLock;

use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, BackendHandle, SamplingParams};
use crate::eval::metrics::rouge_l_tokens;
use crate::index::tokenize;
use crate::seeds::{SeedError, SeedExample, SeedPool};

pub const DEFAULT_TARGET_COUNT: usize = 5000;
pub const DEFAULT_DEMOS_PER_PROMPT: usize = 3;
pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.7;
pub const DEFAULT_DOMAIN: &str = "biomedical";
/// Instructions with fewer terms are discarded.
pub const MIN_INSTRUCTION_TERMS: usize = 3;
const NO_INPUT: &str = "<noinput>";

static BLOCK_START: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?m)^[ \t]*\d+\.[ \t]*Instruction:").unwrap());
static INPUT_LINE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?m)^[ \t]*Input:").unwrap());

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskOrigin {
    pub iteration: u32,
    #[serde(default)]
    pub demo_seed_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedTask {
    pub instruction: String,
    #[serde(default)]
    pub context: String,
    pub origin: TaskOrigin,
    #[serde(default)]
    pub accepted: bool,
}

impl GeneratedTask {
    pub fn new(instruction: impl Into<String>, context: impl Into<String>) -> Self {
        Self {
            instruction: instruction.into(),
            context: context.into(),
            origin: TaskOrigin {
                iteration: 1,
                demo_seed_ids: Vec::new(),
            },
            accepted: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub target_count: usize,
    pub demos_per_prompt: usize,
    pub sampling: SamplingParams,
    pub dedup_threshold: f64,
    /// Hard cap on prompt rounds; `None` derives one from the observed yield.
    pub max_rounds: Option<usize>,
    pub domain_name: String,
    /// Iteration number stamped into task provenance.
    pub iteration: u32,
    /// Prompt rounds issued concurrently.
    pub concurrency: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            target_count: DEFAULT_TARGET_COUNT,
            demos_per_prompt: DEFAULT_DEMOS_PER_PROMPT,
            sampling: SamplingParams {
                max_tokens: 3072,
                ..SamplingParams::default()
            },
            dedup_threshold: DEFAULT_DEDUP_THRESHOLD,
            max_rounds: None,
            domain_name: DEFAULT_DOMAIN.into(),
            iteration: 1,
            concurrency: 1,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.target_count == 0 {
            return Err("target_count must be at least 1".into());
        }
        if self.demos_per_prompt == 0 {
            return Err("demos_per_prompt must be at least 1".into());
        }
        if !(self.dedup_threshold > 0.0 && self.dedup_threshold < 1.0) {
            return Err(format!(
                "dedup_threshold must be in (0, 1), got {}",
                self.dedup_threshold
            ));
        }
        if self.iteration == 0 {
            return Err("iteration must be at least 1".into());
        }
        self.sampling.validate()
    }
}

pub fn instruction_preamble(domain: &str) -> String {
    format!(
        "You are asked to come up with a set of 20 diverse task instructions about a {domain} domain. \
These task instructions will be given to a GPT model and we will evaluate the GPT model for completing the instructions.

Here are the requirements:
1. Try not to repeat the verb for each instruction to maximize diversity.
2. The language used for the instruction also should be diverse. For example, you should combine questions with imperative instructions.
3. The type of instructions should be diverse. The list should include diverse types of tasks like open-ended generation, classification, editing, etc.
4. A GPT language model should be able to complete the instruction. For example, do not ask the assistant to create any visual or audio output. \
For another example, do not ask the assistant to wake you up at 5pm or set a reminder because it cannot perform any action.
5. The instructions should be in English.
6. The instructions should be 1 to 2 sentences long. Either an imperative sentence or a question is permitted.
7. You should generate an appropriate input to the instruction. The input field should contain a specific example provided for the instruction. \
It should involve realistic data and should not contain simple placeholders. The input should provide substantial content to make the instruction challenging.
8. Ensure diverse tasks are covered in the instructions and inputs, while focusing on a {domain} domain.

List of 20 tasks:
"
    )
}

pub fn render_task_block(number: usize, instruction: &str, context: &str) -> String {
    let input = if context.trim().is_empty() {
        NO_INPUT
    } else {
        context
    };
    format!("{number}. Instruction: {instruction}\nInput: {input}\n\n")
}

/// Preamble, numbered demonstrations, then the next item number as a cue.
pub fn build_instruction_prompt(demos: &[&SeedExample], domain_name: &str) -> String {
    let mut prompt = instruction_preamble(domain_name);
    prompt.push('\n');
    for (i, demo) in demos.iter().enumerate() {
        prompt.push_str(&render_task_block(i + 1, &demo.instruction, &demo.context));
    }
    prompt.push_str(&format!("{}.", demos.len() + 1));
    prompt
}

pub fn parse_generated_tasks(raw: &str) -> Vec<GeneratedTask> {
    let mut starts: Vec<usize> = BLOCK_START.find_iter(raw).map(|m| m.start()).collect();
    let leading = raw.trim_start();
    if leading.starts_with("Instruction:") && starts.first() != Some(&(raw.len() - leading.len())) {
        starts.insert(0, raw.len() - leading.len());
    }
    let trailing_ws = &raw[raw.trim_end().len()..];
    let last_complete = trailing_ws.matches('\n').count() >= 2;

    let mut tasks = Vec::new();
    for (i, &start) in starts.iter().enumerate() {
        let end = starts.get(i + 1).copied();
        if end.is_none() && !last_complete {
            log::debug!("dropping truncated trailing block");
            break;
        }
        let block = &raw[start..end.unwrap_or(raw.len())];
        if let Some(task) = parse_block(block) {
            tasks.push(task);
        }
    }
    if tasks.is_empty() && !raw.trim().is_empty() {
        log::debug!("no well-formed task blocks in {} bytes of output", raw.len());
    }
    tasks
}

fn parse_block(block: &str) -> Option<GeneratedTask> {
    let after = &block[block.find("Instruction:")? + "Instruction:".len()..];
    let (instruction, context) = match INPUT_LINE.find(after) {
        Some(m) => (&after[..m.start()], &after[m.end()..]),
        None => (after, ""),
    };
    let instruction = instruction.trim();
    if instruction.is_empty() {
        return None;
    }
    let context = context.trim();
    let context = if context == NO_INPUT { "" } else { context };
    Some(GeneratedTask::new(instruction, context))
}

/// Incremental near-duplicate filter over instruction text.
#[derive(Debug, Clone)]
pub struct DedupFilter {
    threshold: f64,
    existing: Vec<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Verdict {
    Accepted,
    TooShort,
    Duplicate { rouge_l: f64 },
}

impl DedupFilter {
    pub fn new(threshold: f64) -> Self {
        Self {
            threshold,
            existing: Vec::new(),
        }
    }

    pub fn with_existing<'a>(threshold: f64, instructions: impl IntoIterator<Item = &'a str>) -> Self {
        let mut f = Self::new(threshold);
        f.existing.extend(instructions.into_iter().map(tokenize));
        f
    }

    pub fn len(&self) -> usize {
        self.existing.len()
    }

    pub fn is_empty(&self) -> bool {
        self.existing.is_empty()
    }

    /// Highest ROUGE-L F against anything already admitted, stopping early
    /// once the threshold is reached.
    fn max_similarity(&self, tokens: &[String]) -> f64 {
        let mut best: f64 = 0.0;
        for other in &self.existing {
            let (n, m) = (tokens.len(), other.len());
            // ROUGE-L F is bounded by 2·min(n, m)/(n + m).
            let bound = 2.0 * n.min(m) as f64 / (n + m) as f64;
            if bound < self.threshold - 1e-12 || bound <= best {
                continue;
            }
            best = best.max(rouge_l_tokens(tokens, other));
            if best >= self.threshold {
                break;
            }
        }
        best
    }

    pub fn check(&self, instruction: &str) -> Verdict {
        let tokens = tokenize(instruction);
        if tokens.len() < MIN_INSTRUCTION_TERMS {
            return Verdict::TooShort;
        }
        let sim = self.max_similarity(&tokens);
        if sim >= self.threshold {
            Verdict::Duplicate { rouge_l: sim }
        } else {
            Verdict::Accepted
        }
    }

    /// Checks and, when accepted, admits `instruction`.
    pub fn admit(&mut self, instruction: &str) -> Verdict {
        let verdict = self.check(instruction);
        if verdict == Verdict::Accepted {
            self.existing.push(tokenize(instruction));
        }
        verdict
    }
}

/// Accepts candidates in order against `existing` instructions and against
/// each other.
pub fn filter_tasks(
    candidates: Vec<GeneratedTask>,
    existing: &[&str],
    threshold: f64,
) -> Vec<GeneratedTask> {
    let mut filter = DedupFilter::with_existing(threshold, existing.iter().copied());
    candidates
        .into_iter()
        .filter_map(|mut t| {
            (filter.admit(&t.instruction) == Verdict::Accepted).then(|| {
                t.accepted = true;
                t
            })
        })
        .collect()
}

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("invalid generation config: {0}")]
    Config(String),
    #[error(transparent)]
    Seeds(#[from] SeedError),
    #[error("backend failed after {accepted} accepted tasks: {source}")]
    Backend {
        accepted: usize,
        #[source]
        source: BackendError,
    },
    #[error("failed to persist task: {0}")]
    Sink(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationStatus {
    Complete,
    BudgetExhausted,
}

#[derive(Debug, Clone)]
pub struct GenerationOutcome {
    /// Previously persisted tasks followed by the ones accepted in this run.
    pub tasks: Vec<GeneratedTask>,
    pub newly_accepted: usize,
    pub rounds: usize,
    pub status: GenerationStatus,
}

fn round_budget(config: &GenerationConfig, rounds: usize, accepted_this_run: usize) -> usize {
    if let Some(max) = config.max_rounds {
        return max;
    }
    if accepted_this_run == 0 {
        return 10;
    }
    let per_round = accepted_this_run as f64 / rounds as f64;
    10 * (config.target_count as f64 / per_round).ceil() as usize
}

/// Runs prompt rounds until `target_count` tasks are accepted or the round
/// budget runs out. `existing` holds tasks persisted by an earlier run; every
/// new acceptance is handed to `sink` before the next round starts.
pub fn generate_instructions<R: Rng + ?Sized>(
    pool: &SeedPool,
    backend: &BackendHandle,
    config: &GenerationConfig,
    rng: &mut R,
    existing: Vec<GeneratedTask>,
    sink: &mut dyn FnMut(&GeneratedTask) -> io::Result<()>,
) -> Result<GenerationOutcome, GenerationError> {
    config.validate().map_err(GenerationError::Config)?;
    let demos = config.demos_per_prompt.min(pool.len());

    let mut filter = DedupFilter::with_existing(
        config.dedup_threshold,
        pool.seeds()
            .iter()
            .map(|s| s.instruction.as_str())
            .chain(existing.iter().map(|t| t.instruction.as_str())),
    );
    let mut tasks = existing;
    let mut accepted_this_run = 0;
    let mut rounds = 0;

    while tasks.len() < config.target_count {
        if rounds >= round_budget(config, rounds, accepted_this_run) {
            log::warn!(
                "round budget exhausted after {rounds} rounds with {} of {} tasks",
                tasks.len(),
                config.target_count
            );
            return Ok(GenerationOutcome {
                tasks,
                newly_accepted: accepted_this_run,
                rounds,
                status: GenerationStatus::BudgetExhausted,
            });
        }

        let batch = config.concurrency.max(1);
        let mut prompts = Vec::with_capacity(batch);
        for _ in 0..batch {
            let ids = pool.sample_indices(demos, rng)?;
            let chosen: Vec<&SeedExample> = ids.iter().map(|&i| &pool.seeds()[i]).collect();
            prompts.push((ids, build_instruction_prompt(&chosen, &config.domain_name)));
        }
        let replies: Vec<Result<String, BackendError>> = if batch == 1 {
            vec![backend.complete(&prompts[0].1, &config.sampling)]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = prompts
                    .iter()
                    .map(|(_, p)| s.spawn(move || backend.complete(p, &config.sampling)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("generation worker panicked")).collect()
            })
        };

        for ((ids, _), reply) in prompts.into_iter().zip(replies) {
            rounds += 1;
            let raw = reply.map_err(|source| GenerationError::Backend {
                accepted: tasks.len(),
                source,
            })?;
            for mut task in parse_generated_tasks(&raw) {
                if tasks.len() >= config.target_count {
                    break;
                }
                if filter.admit(&task.instruction) != Verdict::Accepted {
                    continue;
                }
                task.accepted = true;
                task.origin = TaskOrigin {
                    iteration: config.iteration,
                    demo_seed_ids: ids.clone(),
                };
                sink(&task)?;
                tasks.push(task);
                accepted_this_run += 1;
            }
        }
    }

    Ok(GenerationOutcome {
        tasks,
        newly_accepted: accepted_this_run,
        rounds,
        status: GenerationStatus::Complete,
    })
}
