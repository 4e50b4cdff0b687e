//! `livelab`: serve the gateway, check submissions, simulate traffic and
//! evaluate rounds.
//!
//! Failures print one line `error[<kind>]: <message>` to stderr and exit
//! with status 1 (2 for usage errors).

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use livelab_core::baseline::tfidf_candidates;
use livelab_core::ingest::{
    parse_candidates, parse_documents, parse_head_queries, validate_run_file, write_candidates, SiteSchema,
};
use livelab_core::metrics::RewardWeights;
use livelab_core::report::{build_report, write_report};
use livelab_core::store::Snapshot;
use livelab_core::{HeadQuery, SystemDescriptor, SystemKind, Task};
use livelab_gateway::config::{load_weights, SinkTarget};
use livelab_gateway::systems::{sanity_check, RemoteContract, RemoteSystem};
use livelab_gateway::{
    build_adapters, Adapter, DirectorySink, FeedbackSink, FeedbackStore, Gateway, GatewayConfig,
    GatewayParts, HttpSink, SystemRequest,
};
use livelab_sim::traffic::TrafficConfig;
use livelab_sim::{run_simulation, HttpTarget, World};

#[derive(Parser)]
#[command(
    name = "livelab",
    version,
    about = "Living-lab evaluation: gateway, simulation and round reports"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the gateway HTTP service.
    Serve {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured listen address.
        #[arg(long, env = "LIVELAB_LISTEN")]
        listen: Option<String>,
    },
    /// Check a TREC run file; positioned errors go to stdout as JSON.
    ValidateRun {
        #[arg(long)]
        run: PathBuf,
        /// Head queries whose ids the run should use.
        #[arg(long)]
        head_queries: Option<PathBuf>,
        /// Candidate file whose keys the run should use.
        #[arg(long)]
        candidates: Option<PathBuf>,
        #[arg(long, default_value = "ranking")]
        task: Task,
        /// Corpus whose ids the run's documents should come from.
        #[arg(long)]
        documents: Option<PathBuf>,
        #[arg(long, default_value = "literature")]
        schema: SiteSchema,
    },
    /// Drive simulated sessions against configured systems.
    Simulate {
        /// Gateway config naming the systems and corpora.
        #[arg(long)]
        config: PathBuf,
        /// Traffic and click-model config; defaults apply without it.
        #[arg(long)]
        traffic: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        sessions: Option<usize>,
        #[arg(long)]
        task: Option<Task>,
        /// Directory for the feedback log and summary.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Send traffic to a running gateway instead of an in-process one.
        #[arg(long)]
        endpoint: Option<String>,
    },
    /// Compute round reports from a feedback log.
    Evaluate {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write dataset recommendation candidates for publications.
    MakeCandidates {
        #[arg(long)]
        publications: PathBuf,
        #[arg(long)]
        datasets: PathBuf,
        #[arg(long, default_value_t = 6)]
        top_k: usize,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "title,title_en,abstract,abstract_en"
        )]
        fields: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Probe a system for errors, duplicate ids and rank gaps.
    SanityCheck {
        /// Gateway config holding the system.
        #[arg(long, requires = "system")]
        config: Option<PathBuf>,
        #[arg(long)]
        system: Option<String>,
        /// A participant endpoint outside any config.
        #[arg(long, conflicts_with = "config")]
        endpoint: Option<String>,
        #[arg(long, default_value = "ranking")]
        task: Task,
        /// A probe request; may be repeated.
        #[arg(long)]
        probe: Vec<String>,
        /// Head-query file to take probes from.
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        max_probes: usize,
    },
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    Config,
    Input,
    Io,
    Check,
    Runtime,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::Config => "config",
            Kind::Input => "input",
            Kind::Io => "io",
            Kind::Check => "check",
            Kind::Runtime => "runtime",
        })
    }
}

struct Failure {
    kind: Kind,
    message: String,
}

fn fail(kind: Kind) -> impl Fn(&dyn fmt::Display) -> Failure {
    move |e| Failure {
        kind,
        message: e.to_string(),
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let result = match cli.command {
        Command::Serve { config, listen } => serve(&config, listen),
        Command::ValidateRun {
            run,
            head_queries,
            candidates,
            task,
            documents,
            schema,
        } => validate_run(
            &run,
            head_queries.as_deref(),
            candidates.as_deref(),
            task,
            documents.as_deref(),
            schema,
        ),
        Command::Simulate {
            config,
            traffic,
            seed,
            sessions,
            task,
            out,
            endpoint,
        } => simulate(
            &config,
            traffic.as_deref(),
            seed,
            sessions,
            task,
            out.as_deref(),
            endpoint,
        ),
        Command::Evaluate { log, weights, out } => evaluate(&log, weights.as_deref(), &out),
        Command::MakeCandidates {
            publications,
            datasets,
            top_k,
            fields,
            out,
        } => make_candidates(&publications, &datasets, top_k, &fields, &out),
        Command::SanityCheck {
            config,
            system,
            endpoint,
            task,
            probe,
            queries,
            max_probes,
        } => sanity(
            config.as_deref(),
            system,
            endpoint,
            task,
            probe,
            queries.as_deref(),
            max_probes,
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let message = f.message.replace(['\n', '\r'], "; ");
            eprintln!("error[{}]: {}", f.kind, message);
            ExitCode::FAILURE
        }
    }
}

fn print_json(value: &impl serde::Serialize) {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value).expect("serializable");
    // A closed pipe (e.g. `| head`) is not an error worth a panic.
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn load_config(path: &Path) -> Result<GatewayConfig, Failure> {
    GatewayConfig::load(path).map_err(|e| fail(Kind::Config)(&e))
}

fn serve(config_path: &Path, listen: Option<String>) -> Outcome {
    let config = load_config(config_path)?;
    let gateway = Arc::new(Gateway::from_config(&config).map_err(|e| fail(Kind::Config)(&e))?);
    let sink: Option<Arc<dyn FeedbackSink>> = match &config.feedback_sink {
        Some(SinkTarget::Directory(dir)) => Some(Arc::new(DirectorySink::new(dir.clone()))),
        Some(SinkTarget::Http(url)) => Some(Arc::new(HttpSink::new(url.clone(), config.remote_timeout))),
        None => None,
    };
    let addr = listen.unwrap_or_else(|| config.listen.clone());
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| fail(Kind::Runtime)(&e))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| fail(Kind::Io)(&format!("cannot bind {addr}: {e}")))?;
        let bound = listener.local_addr().map_err(|e| fail(Kind::Io)(&e))?;
        println!("listening on http://{bound}");
        livelab_gateway::http::serve(gateway, listener, sink, config.flush_interval)
            .await
            .map_err(|e| fail(Kind::Runtime)(&e))
    })
}

fn validate_run(
    run: &Path,
    head_queries: Option<&Path>,
    candidates: Option<&Path>,
    task: Task,
    documents: Option<&Path>,
    schema: SiteSchema,
) -> Outcome {
    let input = fail(Kind::Input);
    let mut known_qids: Option<HashSet<String>> = None;
    if let Some(p) = head_queries {
        let qs = parse_head_queries(p).map_err(|e| input(&e))?;
        known_qids = Some(qs.iter().map(|q| q.qid.to_string()).collect());
    }
    if let Some(p) = candidates {
        let lists = parse_candidates(p, task).map_err(|e| input(&e))?;
        known_qids
            .get_or_insert_with(HashSet::new)
            .extend(lists.keys().map(|k| k.to_string()));
    }
    let known_docs: Option<HashSet<String>> = match documents {
        Some(p) => Some(
            parse_documents(p, schema)
                .map_err(|e| input(&e))?
                .into_iter()
                .map(|d| d.doc_id)
                .collect(),
        ),
        None => None,
    };
    let report = validate_run_file(run, known_qids.as_ref(), known_docs.as_ref()).map_err(|e| input(&e))?;
    print_json(&report);
    if report.ok {
        Ok(())
    } else {
        Err(input(&format!(
            "{}: {} invalid line(s); first: {}",
            run.display(),
            report.line_errors.len(),
            report.line_errors[0]
        )))
    }
}

/// Requests the simulator draws from: head queries by popularity for
/// ranking, publication ids for recommendation.
fn vocabulary(config: &GatewayConfig, task: Task) -> Result<Vec<String>, Failure> {
    let cfg = fail(Kind::Config);
    match task {
        Task::Ranking => {
            let path = config
                .corpora
                .head_queries
                .as_ref()
                .ok_or_else(|| cfg(&"ranking simulation needs corpora.head_queries"))?;
            let mut qs: Vec<HeadQuery> = parse_head_queries(path).map_err(|e| fail(Kind::Input)(&e))?;
            qs.sort_by(|a, b| b.freq.cmp(&a.freq).then(a.qid.cmp(&b.qid)));
            Ok(qs.into_iter().map(|q| q.qstr).collect())
        }
        Task::Recommendation => {
            let path = config
                .corpora
                .publications
                .as_ref()
                .ok_or_else(|| cfg(&"recommendation simulation needs corpora.publications"))?;
            Ok(parse_documents(path, SiteSchema::SocialScience)
                .map_err(|e| fail(Kind::Input)(&e))?
                .into_iter()
                .map(|d| d.doc_id)
                .collect())
        }
    }
}

fn simulate(
    config_path: &Path,
    traffic: Option<&Path>,
    seed: Option<u64>,
    sessions: Option<usize>,
    task: Option<Task>,
    out: Option<&Path>,
    endpoint: Option<String>,
) -> Outcome {
    let config = load_config(config_path)?;
    let mut traffic = match traffic {
        Some(p) => TrafficConfig::load(p).map_err(|e| fail(Kind::Config)(&e))?,
        None => TrafficConfig::default(),
    };
    match seed {
        Some(s) => traffic.seed = s,
        None => eprintln!(
            "seed: {} (from traffic config; pass --seed to override)",
            traffic.seed
        ),
    }
    if let Some(n) = sessions {
        traffic.sessions = n;
    }
    if let Some(t) = task {
        traffic.task = t;
    }
    let adapters = build_adapters(&config).map_err(|e| fail(Kind::Config)(&e))?;
    let oracle = adapters
        .iter()
        .find(|a| {
            let d = a.descriptor();
            d.task == traffic.task
                && match &traffic.world.oracle {
                    Some(name) => &d.name == name,
                    None => d.is_baseline,
                }
        })
        .ok_or_else(|| {
            fail(Kind::Config)(&format!(
                "no oracle system {} for task {}",
                traffic.world.oracle.as_deref().unwrap_or("(baseline)"),
                traffic.task
            ))
        })?;
    let mut vocab = vocabulary(&config, traffic.task)?;
    if let Some(cap) = traffic.world.max_vocabulary {
        vocab.truncate(cap);
    }
    let world = World::from_adapter(
        traffic.task,
        vocab,
        oracle.as_ref(),
        traffic.world.depth,
        traffic.world.relevant,
    )
    .map_err(|e| fail(Kind::Runtime)(&e))?;

    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| fail(Kind::Io)(&format!("{}: {e}", dir.display())))?;
    }
    let summary = match endpoint {
        Some(url) => run_simulation(&HttpTarget::new(url, config.remote_timeout * 4), &world, &traffic),
        None => {
            let log = match out {
                Some(dir) => dir.join("feedback.jsonl"),
                None => config.feedback_log.clone(),
            };
            if std::fs::metadata(&log).map(|m| m.len() > 0).unwrap_or(false) {
                return Err(fail(Kind::Input)(&format!(
                    "{} already holds records; simulate into a fresh log",
                    log.display()
                )));
            }
            let store = FeedbackStore::open(&log).map_err(|e| fail(Kind::Io)(&e))?;
            let gateway = Gateway::from_parts(GatewayParts {
                adapters,
                rpp: config.rpp,
                session_timeout: config.session_timeout,
                rotation_seed: config.rotation_seed,
                weights: config.weights.clone(),
                store: Arc::new(store),
            })
            .map_err(|e| fail(Kind::Config)(&e))?;
            run_simulation(&gateway, &world, &traffic)
        }
    };
    if let Some(dir) = out {
        let text = serde_json::to_string_pretty(&summary).expect("serializable") + "\n";
        let path = dir.join("summary.json");
        std::fs::write(&path, text).map_err(|e| fail(Kind::Io)(&format!("{}: {e}", path.display())))?;
    }
    print_json(&summary);
    match summary.aborted {
        Some(reason) => Err(fail(Kind::Runtime)(&reason)),
        None => Ok(()),
    }
}

fn evaluate(log: &Path, weights: Option<&Path>, out: &Path) -> Outcome {
    let weights = match weights {
        Some(p) => load_weights(p).map_err(|e| fail(Kind::Config)(&e))?,
        None => RewardWeights::default(),
    };
    let snapshot = Snapshot::load(log).map_err(|e| fail(Kind::Input)(&format!("{}: {e}", log.display())))?;
    let report = build_report(&snapshot, &weights);
    let written = write_report(&report, out).map_err(|e| fail(Kind::Io)(&e))?;
    print_json(&written);
    Ok(())
}

fn make_candidates(
    publications: &Path,
    datasets: &Path,
    top_k: usize,
    fields: &[String],
    out: &Path,
) -> Outcome {
    let input = fail(Kind::Input);
    let pubs = parse_documents(publications, SiteSchema::SocialScience).map_err(|e| input(&e))?;
    let data = parse_documents(datasets, SiteSchema::SocialScience).map_err(|e| input(&e))?;
    for (docs, path) in [(&pubs, publications), (&data, datasets)] {
        if docs.is_empty() {
            return Err(input(&format!("{} holds no documents", path.display())));
        }
    }
    let fields: Vec<&str> = fields.iter().map(String::as_str).collect();
    let lists = tfidf_candidates(&pubs, &data, &fields, top_k).map_err(|e| input(&e))?;
    std::fs::write(out, write_candidates(lists.values(), Task::Recommendation))
        .map_err(|e| fail(Kind::Io)(&format!("{}: {e}", out.display())))?;
    eprintln!(
        "wrote candidates for {} publication(s) to {}",
        lists.len(),
        out.display()
    );
    Ok(())
}

fn sanity(
    config_path: Option<&Path>,
    system: Option<String>,
    endpoint: Option<String>,
    task: Task,
    probes: Vec<String>,
    queries: Option<&Path>,
    max_probes: usize,
) -> Outcome {
    let cfg = fail(Kind::Config);
    let (adapter, config): (Adapter, Option<GatewayConfig>) = match (config_path, endpoint) {
        (Some(path), _) => {
            let config = load_config(path)?;
            let name = system.expect("clap requires --system with --config");
            let adapter = build_adapters(&config)
                .map_err(|e| cfg(&e))?
                .into_iter()
                .find(|a| a.descriptor().name == name)
                .ok_or_else(|| cfg(&format!("no system named '{name}' in {}", path.display())))?;
            (adapter, Some(config))
        }
        (None, Some(url)) => {
            let descriptor = SystemDescriptor {
                name: url.clone(),
                kind: SystemKind::LiveRemote,
                task,
                is_baseline: false,
                source: Some(url.clone()),
            };
            let remote = RemoteSystem::new(descriptor, RemoteContract::new(url), Duration::from_secs(5), 1);
            (Arc::new(remote), None)
        }
        (None, None) => return Err(cfg(&"give --config with --system, or --endpoint")),
    };
    let task = adapter.descriptor().task;
    let mut requests = probes;
    if requests.is_empty() {
        if let Some(p) = queries {
            requests = parse_head_queries(p)
                .map_err(|e| fail(Kind::Input)(&e))?
                .into_iter()
                .map(|q| q.qstr)
                .collect();
        } else if let Some(config) = &config {
            requests = vocabulary(config, task)?;
        }
    }
    requests.truncate(max_probes);
    let rpp = config.map_or(10, |c| c.rpp.for_task(task));
    let probes: Vec<SystemRequest> = requests
        .into_iter()
        .map(|request| SystemRequest {
            task,
            request,
            page: 0,
            rpp,
        })
        .collect();
    let report = sanity_check(adapter.as_ref(), &probes);
    print_json(&report);
    if report.passed {
        for w in &report.warnings {
            eprintln!("warning: {w}");
        }
        Ok(())
    } else {
        let failed = report.probes.iter().filter(|p| !p.passed).count();
        Err(fail(Kind::Check)(&format!(
            "system '{}' failed {failed} of {} probe(s)",
            report.system,
            report.probes.len()
        )))
    }
}
