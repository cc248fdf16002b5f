use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use specforge::config::{RunConfig, Stage};
use specforge::contrastive::ContrastMode;
use specforge::pipeline::{self, PipelineError, RunSummary, REPORT_FILE};

#[derive(Parser, Debug)]
#[command(name = "specforge", version, about = "Self-specialization data pipeline")]
struct Cli {
    /// Run configuration (TOML). Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Generator backend: an http(s) URL or mock:<script.json>.
    #[arg(long, global = true, env = "SPECFORGE_BACKEND_URL")]
    backend: Option<String>,

    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,

    /// RNG seed for demo sampling and response sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true)]
    domain: Option<String>,

    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,

    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct IndexArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Index file to write.
    #[arg(long = "out")]
    index_out: Option<PathBuf>,
    #[arg(long)]
    k1: Option<f64>,
    #[arg(long)]
    b: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct GenerateArgs {
    #[arg(long)]
    seeds: Option<PathBuf>,
    #[arg(long)]
    target: Option<usize>,
    #[arg(long)]
    demos: Option<usize>,
    #[arg(long)]
    max_rounds: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct RespondArgs {
    #[arg(long)]
    top_k: Option<usize>,
    /// Decode without retrieved documents.
    #[arg(long)]
    no_retrieval: bool,
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the BM25 index over a corpus.
    Index(IndexArgs),
    /// Generate instruction/input pairs from the seed pool.
    Generate(GenerateArgs),
    /// Generate retrieval-marginalized responses for generated tasks.
    Respond {
        #[command(flatten)]
        respond: RespondArgs,
        #[arg(long)]
        index: Option<PathBuf>,
    },
    /// Second iteration: contrast an aligned expert against the base model.
    Iterate {
        #[arg(long)]
        expert: Option<String>,
        #[arg(long)]
        base: Option<String>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        mode: Option<ContrastMode>,
        #[arg(long)]
        with_retrieval: bool,
    },
    /// Write train.jsonl and train.toml.
    Export {
        /// Fraction of records to hold out.
        #[arg(long)]
        holdout: Option<f64>,
        /// Which iteration's records to export (1 or 2).
        #[arg(long)]
        iteration: Option<u32>,
    },
    /// Verb/object statistics over the generated data.
    Stats,
    /// k-shot evaluation over task files.
    Eval {
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        /// Also copy the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        max_tokens: Option<usize>,
    },
    /// index, generate, respond and export in order.
    All {
        #[command(flatten)]
        index: IndexArgs,
        #[command(flatten)]
        generate: GenerateArgs,
        #[command(flatten)]
        respond: RespondArgs,
    },
}

fn apply_index(c: &mut RunConfig, a: &IndexArgs) {
    if let Some(p) = &a.corpus {
        c.paths.corpus = Some(p.clone());
    }
    if let Some(p) = &a.index_out {
        c.paths.index = Some(p.clone());
    }
    if let Some(v) = a.k1 {
        c.retrieval.k1 = v;
    }
    if let Some(v) = a.b {
        c.retrieval.b = v;
    }
}

fn apply_generate(c: &mut RunConfig, a: &GenerateArgs) {
    if let Some(p) = &a.seeds {
        c.paths.seeds = Some(p.clone());
    }
    if let Some(v) = a.target {
        c.generation.target_count = v;
    }
    if let Some(v) = a.demos {
        c.generation.demos_per_prompt = v;
    }
    if let Some(v) = a.max_rounds {
        c.generation.max_rounds = Some(v);
    }
    if let Some(v) = a.threshold {
        c.generation.dedup_threshold = v;
    }
}

fn apply_respond(c: &mut RunConfig, a: &RespondArgs) {
    if let Some(v) = a.top_k {
        c.retrieval.top_k = v;
    }
    if a.no_retrieval {
        c.retrieval.enabled = false;
    }
    if let Some(v) = a.max_steps {
        c.decode.max_steps = v;
    }
}

/// Folds flags into the config and picks the stage to run.
fn resolve(cli: &Cli) -> Result<(RunConfig, Stage), PipelineError> {
    let mut c = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(b) = &cli.backend {
        c.backends.generator = Some(b.clone());
    }
    if let Some(d) = &cli.run_dir {
        c.run_dir = d.clone();
    }
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    if let Some(d) = &cli.domain {
        c.domain_name = d.clone();
    }
    let stage = match &cli.command {
        Command::Index(a) => {
            apply_index(&mut c, a);
            Stage::Index
        }
        Command::Generate(a) => {
            apply_generate(&mut c, a);
            Stage::Generate
        }
        Command::Respond { respond, index } => {
            apply_respond(&mut c, respond);
            if let Some(p) = index {
                c.paths.index = Some(p.clone());
            }
            Stage::Respond
        }
        Command::Iterate {
            expert,
            base,
            alpha,
            mode,
            with_retrieval,
        } => {
            if let Some(e) = expert {
                c.backends.expert = Some(e.clone());
            }
            if let Some(b) = base {
                c.backends.base = Some(b.clone());
            }
            if let Some(a) = alpha {
                c.contrast.plausibility_alpha = *a;
            }
            if let Some(m) = mode {
                c.contrast.mode = *m;
            }
            if *with_retrieval {
                c.contrast.with_retrieval = true;
            }
            Stage::Iterate
        }
        Command::Export { holdout, iteration } => {
            if let Some(h) = holdout {
                c.export.holdout = *h;
            }
            if let Some(i) = iteration {
                c.export.iteration = *i;
            }
            Stage::Export
        }
        Command::Stats => Stage::Stats,
        Command::Eval {
            tasks,
            k,
            max_tokens,
            ..
        } => {
            if let Some(t) = tasks {
                c.paths.eval_tasks = Some(t.clone());
            }
            if let Some(k) = k {
                c.eval.k = *k;
            }
            if let Some(m) = max_tokens {
                c.eval.max_tokens = *m;
            }
            Stage::Eval
        }
        Command::All {
            index,
            generate,
            respond,
        } => {
            apply_index(&mut c, index);
            apply_generate(&mut c, generate);
            apply_respond(&mut c, respond);
            Stage::All
        }
    };
    Ok((c, stage))
}

fn print_summary(summary: &RunSummary) {
    if summary.all_up_to_date() {
        println!("up to date");
        return;
    }
    for s in &summary.stages {
        let counts: Vec<String> = s.counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let state = if s.up_to_date {
            "up to date".to_string()
        } else {
            format!("{:?}", s.status).to_lowercase()
        };
        println!("{}: {state} ({})", s.stage, counts.join(", "));
        for w in &s.warnings {
            println!("  warning: {w}");
        }
    }
}

fn run(cli: &Cli) -> Result<RunSummary, PipelineError> {
    let (config, stage) = resolve(cli)?;
    if cli.print_config {
        print!("{}", config.to_toml());
        return Ok(RunSummary { stages: Vec::new() });
    }
    let summary = pipeline::run_pipeline(&config, stage)?;
    if let Command::Eval { out: Some(out), .. } = &cli.command {
        std::fs::copy(config.run_dir.join(REPORT_FILE), out).map_err(|e| PipelineError::Stage {
            stage,
            message: format!("copying report to {}: {e}", out.display()),
        })?;
    }
    Ok(summary)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(&cli) {
        Ok(summary) => {
            if !cli.print_config {
                print_summary(&summary);
            }
            ExitCode::from(summary.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
