//! k-shot evaluation harness.
//!
//! Demonstrations and the instance share the export template (see
//! [`crate::dataset`]), so a tuned model sees the prompt shape it was trained
//! on. Each demonstration is the rendered prompt followed by its response and
//! a blank line; the instance comes last with an empty response slot.
//!
//! Completions are greedy. A task with any failed instance is reported as
//! incomplete and left out of family and overall averages.

pub mod metrics;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendHandle, SamplingParams};
use crate::dataset::render_prompt;
use crate::seeds::SeedExample;

pub use metrics::{rouge_l, token_f1};

/// Stops a completion from running into an invented next example.
pub const EVAL_STOP_SEQUENCES: [&str; 3] = ["\n\n### ", "\n\nBelow is an instruction", "</s>"];
pub const DEFAULT_EVAL_MAX_TOKENS: usize = 256;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("k = {k} but task {task:?} only has {available} demonstrations")]
    NotEnoughDemos { task: String, k: usize, available: usize },
    #[error("task {task:?}: {message}")]
    InvalidTask { task: String, message: String },
    #[error("no evaluation tasks given")]
    NoTasks,
    #[error("{path}: {message}")]
    Load { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskFamily {
    QA,
    NER,
    RE,
    SA,
    DC,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 5] = [Self::QA, Self::NER, Self::RE, Self::SA, Self::DC];
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub instruction: String,
    #[serde(default)]
    pub context: String,
    pub gold: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTask {
    pub task_name: String,
    pub task_family: TaskFamily,
    pub instances: Vec<EvalInstance>,
    #[serde(default)]
    pub demos: Vec<SeedExample>,
}

impl EvalTask {
    pub fn validate(&self) -> Result<(), EvalError> {
        let invalid = |message: String| EvalError::InvalidTask {
            task: self.task_name.clone(),
            message,
        };
        if self.task_name.trim().is_empty() {
            return Err(invalid("task_name is empty".into()));
        }
        if self.instances.is_empty() {
            return Err(invalid("no instances".into()));
        }
        for (i, inst) in self.instances.iter().enumerate() {
            if inst.gold.is_empty() {
                return Err(invalid(format!("instance {i} has no gold reference")));
            }
            if inst.instruction.trim().is_empty() {
                return Err(invalid(format!("instance {i} has an empty instruction")));
            }
        }
        Ok(())
    }
}

/// Reads one task file, or every `*.json` file in a directory in name order.
pub fn load_tasks(path: impl AsRef<Path>) -> Result<Vec<EvalTask>, EvalError> {
    let path = path.as_ref();
    let load_err = |p: &Path, message: String| EvalError::Load {
        path: p.to_path_buf(),
        message,
    };
    let files = if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| load_err(path, e.to_string()))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };
    let mut tasks = Vec::with_capacity(files.len());
    for file in files {
        let text = fs::read_to_string(&file).map_err(|e| load_err(&file, e.to_string()))?;
        let task: EvalTask = serde_json::from_str(&text).map_err(|e| load_err(&file, e.to_string()))?;
        task.validate()?;
        tasks.push(task);
    }
    if tasks.is_empty() {
        return Err(EvalError::NoTasks);
    }
    Ok(tasks)
}

/// The first `k` demos of `task` (file order), then the instance.
pub fn build_kshot_prompt(task: &EvalTask, instance: &EvalInstance, k: usize) -> Result<String, EvalError> {
    if k > task.demos.len() {
        return Err(EvalError::NotEnoughDemos {
            task: task.task_name.clone(),
            k,
            available: task.demos.len(),
        });
    }
    let mut prompt = String::new();
    for demo in &task.demos[..k] {
        prompt.push_str(&render_prompt(&demo.instruction, &demo.context));
        prompt.push_str(&demo.response);
        prompt.push_str("\n\n");
    }
    prompt.push_str(&render_prompt(&instance.instruction, &instance.context));
    Ok(prompt)
}

pub fn eval_sampling(max_tokens: usize) -> SamplingParams {
    SamplingParams {
        stop_sequences: EVAL_STOP_SEQUENCES.iter().map(|s| s.to_string()).collect(),
        ..SamplingParams::greedy(max_tokens)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub task_name: String,
    pub instance: usize,
    pub prediction: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub f1: f64,
    pub rouge_l: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub f1: f64,
    pub rouge_l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task_name: String,
    pub task_family: TaskFamily,
    pub instances: usize,
    pub failed: usize,
    pub complete: bool,
    /// Mean over scored instances. Present even for incomplete tasks, which
    /// are still excluded from the averages.
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyScore {
    pub family: TaskFamily,
    pub tasks: usize,
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub tasks: Vec<TaskScore>,
    pub families: Vec<FamilyScore>,
    /// Mean of per-task scores over complete tasks; `None` if none completed.
    pub overall: Option<Scores>,
    pub incomplete_tasks: Vec<String>,
    pub predictions: Vec<Prediction>,
}

fn mean(xs: impl IntoIterator<Item = Scores>) -> Option<Scores> {
    let mut n = 0usize;
    let mut sum = Scores::default();
    for s in xs {
        n += 1;
        sum.f1 += s.f1;
        sum.rouge_l += s.rouge_l;
    }
    (n > 0).then(|| Scores {
        f1: sum.f1 / n as f64,
        rouge_l: sum.rouge_l / n as f64,
    })
}

/// Builds the report from per-instance predictions. Also used to audit a
/// persisted report.
pub fn aggregate(tasks: &[EvalTask], k: usize, predictions: Vec<Prediction>) -> EvalReport {
    let mut task_scores = Vec::with_capacity(tasks.len());
    for task in tasks {
        let preds: Vec<&Prediction> = predictions.iter().filter(|p| p.task_name == task.task_name).collect();
        let failed = preds.iter().filter(|p| p.error.is_some()).count();
        let scored = preds.iter().filter(|p| p.error.is_none()).map(|p| Scores {
            f1: p.f1,
            rouge_l: p.rouge_l,
        });
        task_scores.push(TaskScore {
            task_name: task.task_name.clone(),
            task_family: task.task_family,
            instances: task.instances.len(),
            failed,
            complete: failed == 0 && preds.len() == task.instances.len(),
            scores: mean(scored).unwrap_or_default(),
        });
    }
    let mut by_family: BTreeMap<TaskFamily, Vec<Scores>> = BTreeMap::new();
    for t in task_scores.iter().filter(|t| t.complete) {
        by_family.entry(t.task_family).or_default().push(t.scores);
    }
    let families = by_family
        .into_iter()
        .map(|(family, scores)| FamilyScore {
            family,
            tasks: scores.len(),
            scores: mean(scores).unwrap_or_default(),
        })
        .collect();
    EvalReport {
        k,
        overall: mean(task_scores.iter().filter(|t| t.complete).map(|t| t.scores)),
        incomplete_tasks: task_scores
            .iter()
            .filter(|t| !t.complete)
            .map(|t| t.task_name.clone())
            .collect(),
        tasks: task_scores,
        families,
        predictions,
    }
}

/// Prompts, completes and scores every instance. Instances run in batches of
/// the backend's in-flight limit; results keep task and instance order.
pub fn run_eval(
    tasks: &[EvalTask],
    backend: &BackendHandle,
    k: usize,
    params: &SamplingParams,
) -> Result<EvalReport, EvalError> {
    if tasks.is_empty() {
        return Err(EvalError::NoTasks);
    }
    let mut jobs = Vec::new();
    for task in tasks {
        task.validate()?;
        for (i, inst) in task.instances.iter().enumerate() {
            jobs.push((task, i, inst, build_kshot_prompt(task, inst, k)?));
        }
    }

    let score = |(task, i, inst, prompt): &(&EvalTask, usize, &EvalInstance, String)| {
        let (prediction, error) = match backend.complete(prompt, params) {
            Ok(text) => (Some(text.trim().to_string()), None),
            Err(e) => {
                log::warn!("{} instance {i}: {e}", task.task_name);
                (None, Some(e.to_string()))
            }
        };
        let (f1, rl) = match &prediction {
            Some(p) => (token_f1(p, &inst.gold), rouge_l(p, &inst.gold)),
            None => (0.0, 0.0),
        };
        Prediction {
            task_name: task.task_name.clone(),
            instance: *i,
            prediction,
            error,
            f1,
            rouge_l: rl,
        }
    };

    let width = backend.max_in_flight().max(1);
    let mut predictions = Vec::with_capacity(jobs.len());
    for batch in jobs.chunks(width) {
        if batch.len() == 1 {
            predictions.push(score(&batch[0]));
            continue;
        }
        let done: Vec<Prediction> = std::thread::scope(|s| {
            let handles: Vec<_> = batch.iter().map(|job| s.spawn(|| score(job))).collect();
            handles.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
        });
        predictions.extend(done);
    }
    Ok(aggregate(tasks, k, predictions))
}

impl EvalReport {
    /// Plain-text table: one row per task grouped by family, a family average
    /// after each group and the overall average last. Scores are percentages.
    pub fn render_table(&self) -> String {
        let name_w = self
            .tasks
            .iter()
            .map(|t| t.task_name.len() + 2)
            .chain([12])
            .max()
            .unwrap_or(12);
        let mut out = format!("{:<6} {:<name_w$} {:>8} {:>8}\n", "Family", "Task", "F1", "R-L");
        out.push_str(&format!("{}\n", "-".repeat(6 + 1 + name_w + 18)));
        for family in TaskFamily::ALL {
            let rows: Vec<&TaskScore> = self.tasks.iter().filter(|t| t.task_family == family).collect();
            if rows.is_empty() {
                continue;
            }
            for t in rows {
                let name = if t.complete {
                    t.task_name.clone()
                } else {
                    format!("{}*", t.task_name)
                };
                out.push_str(&format!(
                    "{:<6} {:<name_w$} {:>8.2} {:>8.2}\n",
                    family.to_string(),
                    name,
                    100.0 * t.scores.f1,
                    100.0 * t.scores.rouge_l
                ));
            }
            if let Some(f) = self.families.iter().find(|f| f.family == family) {
                out.push_str(&format!(
                    "{:<6} {:<name_w$} {:>8.2} {:>8.2}\n",
                    "",
                    "Average",
                    100.0 * f.scores.f1,
                    100.0 * f.scores.rouge_l
                ));
            }
        }
        out.push_str(&format!("{}\n", "-".repeat(6 + 1 + name_w + 18)));
        match self.overall {
            Some(o) => out.push_str(&format!(
                "{:<6} {:<name_w$} {:>8.2} {:>8.2}\n",
                "All",
                format!("Average (k={})", self.k),
                100.0 * o.f1,
                100.0 * o.rouge_l
            )),
            None => out.push_str("All    no complete tasks\n"),
        }
        if !self.incomplete_tasks.is_empty() {
            out.push_str("* incomplete, excluded from averages\n");
        }
        out
    }
}
