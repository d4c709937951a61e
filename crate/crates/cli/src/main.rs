use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use visualmem::service::{router, AppState};
use visualmem::{EngineConfig, EntityFilter, EntityView, FactFilter, FactView};
use visualmem_core::eval::{self, render_report, ReferenceMode, ReportFormat, SystemConfig};
use visualmem_core::pipeline::ObservationStatus;
use visualmem_core::query::{Choice, ChoiceKey, Query, QuestionType};
use visualmem_core::visual_store::{EntityKind, FactCategory, OwnerRelation};

/// Long-term visual and text memory for multimodal conversations.
#[derive(Debug, Parser)]
#[command(name = "visualmem", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Ingest an events file (one JSON event per line) into the store.
    Ingest {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        events: PathBuf,
    },
    /// Answer one multiple-choice question, or preview retrieval.
    Query(QueryArgs),
    /// Run the benchmark and write the results table.
    Eval(EvalArgs),
    /// Dump stored entities, facts or observations.
    Inspect {
        #[arg(long)]
        config: PathBuf,
        #[command(subcommand)]
        what: InspectWhat,
    },
    /// Load a benchmark directory and report problems.
    Validate {
        #[arg(long)]
        benchmark: PathBuf,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

#[derive(Debug, clap::Args)]
struct QueryArgs {
    #[arg(long)]
    config: PathBuf,
    /// Query as JSON (question, choices, question_type, attached_image).
    #[arg(long, conflicts_with_all = ["question", "text"])]
    query_file: Option<PathBuf>,
    #[arg(long, conflicts_with = "text")]
    question: Option<String>,
    /// `KEY=VALUE`, given once per option A to D.
    #[arg(long = "choice", value_parser = parse_choice)]
    choices: Vec<(ChoiceKey, String)>,
    /// Free-text retrieval preview; nothing is answered.
    #[arg(long)]
    text: Option<String>,
    /// Hits to show with --text.
    #[arg(short, default_value_t = 10)]
    k: usize,
    /// Show the routed, packed memory instead of answering.
    #[arg(long)]
    preview: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Markdown,
    Csv,
}

#[derive(Debug, clap::Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    benchmark: PathBuf,
    /// Where to write the table; standard output when absent.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Markdown)]
    format: Format,
    /// Also write `<row>.json` and `<row>.records.jsonl` per row here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Add the text/visual/pending/window ablation rows.
    #[arg(long)]
    ablations: bool,
    /// Skip the full-context and oracle rows.
    #[arg(long)]
    no_references: bool,
}

#[derive(Debug, Subcommand)]
enum InspectWhat {
    Entities {
        #[arg(long, value_parser = snake::<EntityKind>)]
        kind: Option<EntityKind>,
        #[arg(long, value_parser = snake::<OwnerRelation>)]
        owner: Option<OwnerRelation>,
        #[arg(long)]
        name: Option<String>,
    },
    Facts {
        #[arg(long, value_parser = snake::<FactCategory>)]
        category: Option<FactCategory>,
        #[arg(long)]
        contains: Option<String>,
    },
    /// Pending observations, or those with --status.
    Pending {
        #[arg(long, value_parser = snake::<ObservationStatus>)]
        status: Option<ObservationStatus>,
    },
}

/// Parses a snake_case enum value the way the JSON files spell it.
fn snake<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.trim().to_lowercase().replace('-', "_")))
        .map_err(|_| format!("unknown value {s:?}"))
}

fn parse_choice(s: &str) -> Result<(ChoiceKey, String), String> {
    let (k, v) = s.split_once('=').ok_or("expected KEY=VALUE")?;
    Ok((k.parse()?, v.to_string()))
}

/// Bad invocations the argument parser cannot catch; exit code 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn print_json(value: &impl serde::Serialize) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn load_config(path: &Path) -> anyhow::Result<EngineConfig> {
    Ok(EngineConfig::load(path)?)
}

fn ingest(config: &Path, events: &Path) -> anyhow::Result<()> {
    let config = load_config(config)?;
    let mut engine = visualmem::open_engine(&config, config.gateway()?)?;
    let events = visualmem::read_events(events)?;
    let mut out = std::io::stdout().lock();
    for event in &events {
        let report = engine.ingest_event(event).with_context(|| format!("ingesting {}", event.event_id))?;
        serde_json::to_writer(&mut out, &report)?;
        writeln!(out)?;
        // Save as we go so a later failure keeps the earlier events.
        engine.save(&config.store_dir).with_context(|| format!("saving to {}", config.store_dir.display()))?;
    }
    eprintln!("ingested {} events into {}", events.len(), config.store_dir.display());
    Ok(())
}

fn query(args: QueryArgs) -> anyhow::Result<()> {
    let config = load_config(&args.config)?;
    let engine = visualmem::open_engine(&config, config.gateway()?)?;
    if let Some(text) = &args.text {
        return print_json(&visualmem::search(&engine, text, args.k)?);
    }
    let query: Query = match (&args.query_file, &args.question) {
        (Some(path), _) => {
            let body = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&body).with_context(|| format!("parsing {}", path.display()))?
        }
        (None, Some(question)) => {
            let choices: BTreeMap<ChoiceKey, Choice> =
                args.choices.iter().map(|(k, v)| (*k, Choice::text(v.clone()))).collect();
            Query {
                question: question.clone(),
                choices,
                question_type: QuestionType::Text,
                attached_image: None,
                attached_prompt: None,
            }
        }
        (None, None) => return Err(usage("give --query-file, --question with four --choice, or --text")),
    };
    if let Err(e) = query.validate() {
        return Err(usage(e.to_string()));
    }
    if args.preview {
        let (route, bundle) = engine.preview(&query, config.budget)?;
        return print_json(&serde_json::json!({ "route": route, "bundle": bundle }));
    }
    print_json(&engine.answer(&query, config.budget)?)
}

fn slug(name: &str) -> String {
    let s: String = name.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' }).collect();
    s.split('-').filter(|p| !p.is_empty()).collect::<Vec<_>>().join("-")
}

fn run_eval(args: EvalArgs) -> anyhow::Result<()> {
    let config = load_config(&args.config)?;
    let gw = config.gateway()?;
    let bench = visualmem::load_benchmark_dir(&args.benchmark)?;
    for w in &bench.warnings {
        eprintln!("warning: {w}");
    }
    let mut systems = Vec::new();
    if args.ablations {
        systems.extend(eval::presets().into_iter().map(|mut s| {
            s.budget = config.budget;
            s
        }));
    }
    if !systems.iter().any(|s| s.pipeline == config.pipeline) {
        let mut s = SystemConfig::new("configured system", config.pipeline);
        s.budget = config.budget;
        systems.push(s);
    }
    let mut reports = Vec::new();
    for s in &systems {
        reports.push(eval::run_system_eval(&bench.personas, s, gw.clone()).with_context(|| format!("evaluating {}", s.name))?);
    }
    if !args.no_references {
        for mode in [ReferenceMode::FullContext, ReferenceMode::Oracle] {
            reports.push(eval::run_reference(&bench.personas, mode, config.budget, gw.clone()).with_context(|| format!("evaluating {mode}"))?);
        }
    }
    let format = match args.format {
        Format::Markdown => ReportFormat::Markdown,
        Format::Csv => ReportFormat::Csv,
    };
    let table = render_report(&reports, format);
    match &args.report {
        Some(path) => std::fs::write(path, &table).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{table}"),
    }
    if let Some(dir) = &args.out_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for r in &reports {
            let base = slug(&r.name);
            r.write_json(dir.join(format!("{base}.json")))?;
            let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{base}.records.jsonl")))?);
            r.write_records(&mut f)?;
            f.flush()?;
        }
    }
    Ok(())
}

fn inspect(config: &Path, what: InspectWhat) -> anyhow::Result<()> {
    let config = load_config(config)?;
    if !visualmem_core::Engine::exists(&config.store_dir) {
        bail!("no saved store in {}", config.store_dir.display());
    }
    let engine = visualmem::open_engine(&config, config.gateway()?)?;
    match what {
        InspectWhat::Entities { kind, owner, name } => {
            let found = visualmem::entities(&engine, &EntityFilter { kind, owner, name });
            print_json(&found.into_iter().map(EntityView::from).collect::<Vec<_>>())
        }
        InspectWhat::Facts { category, contains } => {
            let found = visualmem::facts(&engine, &FactFilter { category, contains });
            print_json(&found.into_iter().map(FactView::from).collect::<Vec<_>>())
        }
        InspectWhat::Pending { status } => print_json(&visualmem::observations(&engine, status)),
    }
}

fn validate(dir: &Path) -> anyhow::Result<()> {
    let bench = visualmem::load_benchmark_dir(dir)?;
    for w in &bench.warnings {
        eprintln!("warning: {w}");
    }
    for p in &bench.personas {
        println!("{}: {} events, {} questions", p.persona_id, p.events.len(), p.questions.len());
    }
    Ok(())
}

fn serve(config: &Path, addr: &str) -> anyhow::Result<()> {
    let config = load_config(config)?;
    let engine = visualmem::open_engine(&config, config.gateway()?)?;
    std::fs::create_dir_all(&config.store_dir).with_context(|| format!("creating {}", config.store_dir.display()))?;
    let state = AppState::new(engine, config.budget, Some(config.store_dir.clone()));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
        tracing::info!("listening on {}", listener.local_addr()?);
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = match cli.command {
        Command::Ingest { config, events } => ingest(&config, &events),
        Command::Query(args) => query(args),
        Command::Eval(args) => run_eval(args),
        Command::Inspect { config, what } => inspect(&config, what),
        Command::Validate { benchmark } => validate(&benchmark),
        Command::Serve { config, addr } => serve(&config, &addr),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<Usage>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
