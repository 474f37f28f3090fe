//! The `nluforge` command line. Every command is a REST call: with `--api`
//! against a running gateway, otherwise against an in-process gateway over
//! the local store.

use std::io::Write;
use std::path::PathBuf;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::convert::DatasetFormat;
use crate::eval::{EvaluationReport, MatrixLevel, MatrixSummary};
use crate::gateway::{
    ApiClient, ApiError, Gateway, ImportRequest, Platform, PlatformConfig, ReportView, SubmitJobRequest, ENV_PREFIX,
};
use crate::ir::Split;
use crate::models::{Grid, Hyperparams, Metric};
use crate::scheduler::{InstanceConfig, JobRecord, JobState, LISTENING_PREFIX};
use crate::store::{FsStore, VersionId};
use crate::worker::{JobSpec, Worker, WorkerServer};

/// Scheduler tick period of the in-process gateway.
const LOCAL_TICK_S: f64 = 0.05;

#[derive(Debug, Parser)]
#[command(name = "nluforge", version, about = "Train and evaluate joint intent and slot models on managed workers")]
pub struct Cli {
    /// Gateway base URL; without it commands run against a local store.
    #[arg(long, global = true, env = "NLUFORGE_API")]
    pub api: Option<String>,
    /// Print machine-readable JSON.
    #[arg(long, global = true)]
    pub json: bool,
    /// Store directory for local mode and `serve`.
    #[arg(long, global = true)]
    pub store_root: Option<PathBuf>,
    /// JSON platform config; `NLUFORGE_*` variables override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the REST gateway until interrupted.
    Serve {
        #[arg(long)]
        bind: Option<String>,
    },
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Train a model on a dataset's train split.
    Train(TrainArgs),
    /// Score a stored model on a dataset split.
    Test(TestArgs),
    /// Search hyperparameters on the dev split, then train the best point.
    Gridsearch(GridArgs),
    #[command(subcommand)]
    Jobs(JobsCmd),
    #[command(subcommand)]
    Instances(InstancesCmd),
    #[command(subcommand)]
    Models(ModelsCmd),
    #[command(subcommand)]
    Report(ReportCmd),
    /// Serve one worker; used by the subprocess provider.
    #[command(hide = true)]
    Worker {
        #[arg(long)]
        store_root: PathBuf,
        #[arg(long)]
        instance_id: String,
        #[arg(long, default_value_t = 1)]
        capacity: usize,
        #[arg(long, default_value = "127.0.0.1:0")]
        bind: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum DatasetCmd {
    /// Import a file as a new dataset version.
    Import {
        file: PathBuf,
        #[arg(long)]
        format: DatasetFormat,
        #[arg(long)]
        name: String,
        #[arg(long)]
        id: Option<String>,
    },
    /// Write a dataset version in one of the supported formats.
    Export {
        id: String,
        #[arg(long)]
        format: DatasetFormat,
        #[arg(long)]
        version: Option<u64>,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Validate {
        id: String,
        #[arg(long)]
        version: Option<u64>,
    },
    List,
    Show {
        id: String,
        #[arg(long)]
        version: Option<u64>,
    },
}

#[derive(Debug, Args)]
pub struct JobArgs {
    /// Job id; assigned by the scheduler when absent.
    #[arg(long)]
    pub job_id: Option<String>,
    /// Pin the job to one instance.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub team: Option<String>,
    #[arg(long)]
    pub idempotency_key: Option<String>,
    /// Wait for the job to finish (the default).
    #[arg(long, conflicts_with = "no_wait")]
    pub wait: bool,
    /// Return after submission instead of waiting (remote mode only).
    #[arg(long)]
    pub no_wait: bool,
    #[arg(long, default_value_t = 3600)]
    pub timeout_s: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub dataset: String,
    #[arg(long)]
    pub dataset_version: Option<u64>,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub feature_window: Option<usize>,
    #[arg(long)]
    pub no_affixes: bool,
    /// Train once per seed and keep the median model by dev score.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long, default_value = "slot_f1")]
    pub metric: Metric,
    /// Output model name; defaults to the dataset id.
    #[arg(long)]
    pub model: Option<String>,
    #[command(flatten)]
    pub job: JobArgs,
}

#[derive(Debug, Args)]
pub struct TestArgs {
    pub dataset: String,
    #[arg(long)]
    pub dataset_version: Option<u64>,
    #[arg(long)]
    pub model: String,
    #[arg(long)]
    pub model_version: Option<String>,
    #[arg(long)]
    pub split: Option<Split>,
    #[command(flatten)]
    pub job: JobArgs,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    pub dataset: String,
    #[arg(long)]
    pub dataset_version: Option<u64>,
    /// One axis per flag, e.g. `--grid epochs=5,10`.
    #[arg(long = "grid", required = true)]
    pub axes: Vec<String>,
    #[arg(long, default_value = "slot_f1")]
    pub metric: Metric,
    #[arg(long)]
    pub model: Option<String>,
    #[command(flatten)]
    pub job: JobArgs,
}

#[derive(Debug, Subcommand)]
pub enum JobsCmd {
    List,
    Show { id: String },
    Cancel { id: String },
}

#[derive(Debug, Subcommand)]
pub enum InstancesCmd {
    List,
    Create {
        #[arg(long, default_value_t = 1)]
        capacity: usize,
        #[arg(long)]
        reserved_by: Option<String>,
        /// Exempt from idle shutdown.
        #[arg(long)]
        pinned: bool,
    },
    Stop { id: String },
}

#[derive(Debug, Subcommand)]
pub enum ModelsCmd {
    List,
    Download {
        name: String,
        #[arg(long)]
        version: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum ReportCmd {
    Show {
        key: String,
    },
    Confusion {
        key: String,
        #[arg(long, default_value = "intent")]
        level: MatrixLevel,
    },
    /// List the instances behind one confusion-matrix cell.
    Cell {
        key: String,
        #[arg(long, default_value = "intent")]
        level: MatrixLevel,
        #[arg(long)]
        gold: String,
        #[arg(long)]
        pred: String,
        #[arg(long)]
        cursor: Option<String>,
        #[arg(long)]
        limit: Option<usize>,
        /// Follow cursors until the cell is exhausted.
        #[arg(long)]
        all: bool,
    },
}

/// Failure of a command: an API error or a job that did not succeed.
struct Failure(String);

impl From<ApiError> for Failure {
    fn from(e: ApiError) -> Self {
        let mut msg = format!("error [{}] {}", serde_json::to_value(e.code).unwrap().as_str().unwrap_or("?"), e.message);
        if let Some(d) = &e.details {
            msg.push_str(&format!(" {}", serde_json::to_string(d).unwrap_or_default()));
        }
        Failure(msg)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure(format!("error: {e}"))
    }
}

type CmdResult = Result<(), Failure>;

/// A client plus, in local mode, the gateway it talks to.
struct Session {
    client: ApiClient,
    local: bool,
    _gateway: Option<Gateway>,
}

fn local_config(cli: &Cli) -> Result<PlatformConfig, Failure> {
    let vars = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX));
    let mut config = PlatformConfig::load(cli.config.as_deref(), vars).map_err(|e| Failure(format!("error [bad_config] {e}")))?;
    if let Some(root) = &cli.store_root {
        config.store_root = root.clone();
    }
    Ok(config)
}

fn session(cli: &Cli) -> Result<Session, Failure> {
    if let Some(api) = &cli.api {
        return Ok(Session {
            client: ApiClient::new(api)?,
            local: false,
            _gateway: None,
        });
    }
    let mut config = local_config(cli)?;
    config.tick_period_s = LOCAL_TICK_S;
    let platform = Platform::open(config)?;
    let gateway = Gateway::start(platform, "127.0.0.1:0")?;
    Ok(Session {
        client: ApiClient::new(&gateway.url())?,
        local: true,
        _gateway: Some(gateway),
    })
}

struct Out<'a> {
    w: &'a mut dyn Write,
    json: bool,
}

impl Out<'_> {
    /// JSON when `--json`, otherwise the human rendering.
    fn emit<T: Serialize>(&mut self, value: &T, human: impl FnOnce(&T) -> String) -> std::io::Result<()> {
        if self.json {
            writeln!(self.w, "{}", serde_json::to_string_pretty(value).expect("serializable"))
        } else {
            let text = human(value);
            write!(self.w, "{text}")?;
            if !text.ends_with('\n') && !text.is_empty() {
                writeln!(self.w)?;
            }
            Ok(())
        }
    }
}

fn fmt_opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "-".to_string(), |v| v.to_string())
}

fn render_report(r: &EvaluationReport) -> String {
    let mut s = format!(
        "split {} of {} v{} ({} utterances), model {}\n",
        r.split, r.corpus.id, r.corpus.version, r.n_utterances, r.model_version
    );
    s += &format!("intent accuracy  {}\n", r.intent_accuracy.map_or("-".into(), |a| format!("{a:.4}")));
    s += &format!("slot precision   {:.4}\nslot recall      {:.4}\nslot f1          {:.4}\n", r.slot_precision, r.slot_recall, r.slot_f1);
    for (label, score) in &r.per_label {
        s += &format!("  {label:<24} p {:.4}  r {:.4}  f1 {:.4}  support {}\n", score.precision, score.recall, score.f1, score.support);
    }
    s
}

fn render_job(j: &JobRecord) -> String {
    let mut s = format!(
        "job {} ({}) {} on {} attempts {}\n",
        j.spec.job_id,
        j.spec.kind,
        j.state,
        fmt_opt(&j.assigned_instance),
        j.attempts
    );
    if let Some(e) = &j.error {
        s += &format!("error: {e}\n");
    }
    if let Some(r) = &j.result {
        if let Some(m) = &r.model {
            s += &format!("model  {} @ {}\n", m.key, m.version);
        }
        if let Some(rep) = &r.report {
            s += &format!("report {} @ {}\n", rep.key, rep.version);
        }
        if let Some(g) = &r.grid {
            let best = g.leaderboard.iter().map(|e| e.score).fold(f64::NEG_INFINITY, f64::max);
            s += &format!("grid best {:?} {} {:.4} over {} points\n", g.best, g.metric.as_str(), best, g.leaderboard.len());
        }
        if !r.seed_scores.is_empty() {
            let scores: Vec<String> = r.seed_scores.iter().map(|s| format!("{}:{:.4}", s.seed, s.score)).collect();
            s += &format!("seed scores {} mean {}\n", scores.join(" "), r.seed_mean.map_or("-".into(), |m| format!("{m:.4}")));
        }
        if let Some(d) = &r.dev_report {
            s += "dev scores:\n";
            s += &render_report(d);
        }
    }
    s
}

fn render_matrix(m: &MatrixSummary) -> String {
    let width = m.labels.iter().map(String::len).max().unwrap_or(4).max(4);
    let mut s = format!("{:width$}", "gold\\pred");
    for l in &m.labels {
        s += &format!(" {l:>width$}");
    }
    s.push('\n');
    for g in &m.labels {
        s += &format!("{g:width$}");
        for p in &m.labels {
            let n = m.cells.iter().find(|c| &c.gold == g && &c.pred == p).map_or(0, |c| c.count);
            s += &format!(" {n:>width$}");
        }
        s.push('\n');
    }
    s
}

#[derive(Serialize)]
struct JobOutcome {
    job: JobRecord,
    /// The stored report of a finished test job.
    report: Option<ReportView>,
}

/// Submits a job and, unless `--no-wait` in remote mode, waits for it. A
/// job that ends in any state but `succeeded` is a failure.
fn run_job(session: &Session, out: &mut Out, spec: JobSpec, args: &JobArgs) -> CmdResult {
    let req = SubmitJobRequest {
        spec,
        target_instance: args.target.clone(),
        idempotency_key: args.idempotency_key.clone(),
    };
    let job = session.client.submit_job(&req)?;
    if args.no_wait && !session.local {
        out.emit(&job, render_job)?;
        return Ok(());
    }
    let done = session.client.wait_job(&job.spec.job_id, Duration::from_secs(args.timeout_s))?;
    let report = match done.result.as_ref().and_then(|r| r.report.as_ref()) {
        Some(r) => Some(session.client.get_report(r.key.strip_prefix("reports/").unwrap_or(&r.key))?),
        None => None,
    };
    let view = JobOutcome { job: done, report };
    out.emit(&view, |v| {
        let mut s = render_job(&v.job);
        if let Some(r) = &v.report {
            s += &render_report(&r.report);
        }
        s
    })?;
    let done = view.job;
    if done.state != JobState::Succeeded {
        return Err(Failure(format!("job {} {}", done.spec.job_id, done.state)));
    }
    Ok(())
}

fn base_spec(mut spec: JobSpec, version: Option<u64>, args: &JobArgs) -> JobSpec {
    spec.corpus.version = version;
    spec.team = args.team.clone();
    spec
}

/// Logs to stderr for long-running commands; `RUST_LOG` overrides the
/// `info` default.
fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .try_init();
}

fn dispatch(cli: &Cli, out: &mut Out) -> CmdResult {
    match &cli.command {
        Command::Serve { bind } => {
            init_logging();
            let mut config = local_config(cli)?;
            if let Some(b) = bind {
                config.bind = b.clone();
            }
            let bind = config.bind.clone();
            let platform = Platform::open(config)?;
            let gateway = Gateway::start(platform, &bind)?;
            writeln!(out.w, "{LISTENING_PREFIX}{}", gateway.url())?;
            out.w.flush()?;
            gateway.wait_for_signal();
            Ok(())
        }
        Command::Worker {
            store_root,
            instance_id,
            capacity,
            bind,
        } => {
            init_logging();
            let store = FsStore::open(store_root).map_err(|e| Failure(format!("error [store_unwritable] {e}")))?;
            let worker = Worker::new(instance_id.clone(), *capacity, std::sync::Arc::new(store));
            let server = WorkerServer::start(worker, bind)?;
            writeln!(out.w, "{LISTENING_PREFIX}{}", server.url())?;
            out.w.flush()?;
            server.join();
            Ok(())
        }
        command => {
            let session = session(cli)?;
            dispatch_api(command, &session, out)
        }
    }
}

fn dispatch_api(command: &Command, session: &Session, out: &mut Out) -> CmdResult {
    let c = &session.client;
    match command {
        Command::Dataset(cmd) => match cmd {
            DatasetCmd::Import { file, format, name, id } => {
                let payload = std::fs::read_to_string(file).map_err(|e| Failure(format!("error: cannot read {}: {e}", file.display())))?;
                let req = ImportRequest {
                    format: *format,
                    name: name.clone(),
                    id: id.clone(),
                    payload: Some(payload),
                    payload_path: None,
                };
                let r = c.import_dataset(&req)?;
                out.emit(&r, |r| {
                    let mut s = format!(
                        "imported {} v{}: {} utterances, {} intents, {} slot types\n",
                        r.dataset.id,
                        r.dataset.version,
                        r.dataset.n_utterances,
                        r.dataset.intents.len(),
                        r.dataset.slot_types.len()
                    );
                    for d in &r.conversion.dropped {
                        s += &format!("dropped {}: {}\n", d.id, d.reason);
                    }
                    s
                })?;
            }
            DatasetCmd::Export { id, format, version, out: path } => {
                let bytes = c.export_dataset(id, *format, *version)?;
                match path {
                    Some(p) => std::fs::write(p, bytes)?,
                    None => out.w.write_all(&bytes)?,
                }
            }
            DatasetCmd::Validate { id, version } => {
                let r = c.validate_dataset(id, *version)?;
                out.emit(&r, |r| {
                    let mut s = format!("{}: {} issues\n", if r.valid { "valid" } else { "invalid" }, r.issues.len());
                    for i in &r.issues {
                        s += &format!("{}\n", serde_json::to_string(i).unwrap_or_default());
                    }
                    s
                })?;
                if !r.valid {
                    return Err(Failure(format!("dataset {id} has validation errors")));
                }
            }
            DatasetCmd::List => {
                let list = c.list_datasets()?;
                out.emit(&list, |l| {
                    l.iter()
                        .map(|d| format!("{}\tv{}\t{} utterances\t{}\n", d.id, d.version, d.n_utterances, d.name))
                        .collect()
                })?;
            }
            DatasetCmd::Show { id, version } => {
                let d = c.get_dataset(id, *version)?;
                out.emit(&d, |d| {
                    let mut s = format!("{} v{} {}\n", d.id, d.version, d.name);
                    for u in &d.utterances {
                        s += &format!("{}\t{}\t{}\t{}\n", u.id, u.split, fmt_opt(&u.intent), u.text);
                    }
                    s
                })?;
            }
        },
        Command::Train(a) => {
            let mut hyper = Hyperparams::default();
            if let Some(e) = a.epochs {
                hyper.epochs = e;
            }
            if let Some(s) = a.seed {
                hyper.seed = s;
            }
            if let Some(w) = a.feature_window {
                hyper.feature_window = w;
            }
            hyper.use_prefix_suffix = !a.no_affixes;
            let mut spec = base_spec(JobSpec::train(a.job.job_id.clone().unwrap_or_default(), &a.dataset, hyper), a.dataset_version, &a.job);
            spec.seeds = a.seeds.clone();
            spec.metric = a.metric;
            if let Some(m) = &a.model {
                spec.model = Some(crate::worker::ModelSelector { name: m.clone(), version: None });
            }
            run_job(session, out, spec, &a.job)?;
        }
        Command::Test(a) => {
            let mut spec = base_spec(
                JobSpec::test(a.job.job_id.clone().unwrap_or_default(), &a.dataset, &a.model, VersionId::from("")),
                a.dataset_version,
                &a.job,
            );
            spec.model.as_mut().expect("test spec has a model").version = a.model_version.as_deref().map(VersionId::from);
            spec.split = a.split;
            run_job(session, out, spec, &a.job)?;
        }
        Command::Gridsearch(a) => {
            let mut grid = Grid::default();
            for axis in &a.axes {
                grid.set_from_str(axis).map_err(|e| Failure(format!("error [invalid_request] {e}")))?;
            }
            let mut spec = base_spec(
                JobSpec::grid_search(a.job.job_id.clone().unwrap_or_default(), &a.dataset, grid, a.metric),
                a.dataset_version,
                &a.job,
            );
            if let Some(m) = &a.model {
                spec.model = Some(crate::worker::ModelSelector { name: m.clone(), version: None });
            }
            run_job(session, out, spec, &a.job)?;
        }
        Command::Jobs(cmd) => match cmd {
            JobsCmd::List => {
                let jobs = c.list_jobs()?;
                out.emit(&jobs, |l| {
                    l.iter()
                        .map(|j| format!("{}\t{}\t{}\t{}\n", j.spec.job_id, j.spec.kind, j.state, fmt_opt(&j.assigned_instance)))
                        .collect()
                })?;
            }
            JobsCmd::Show { id } => out.emit(&c.get_job(id)?, render_job)?,
            JobsCmd::Cancel { id } => out.emit(&c.cancel_job(id)?, render_job)?,
        },
        Command::Instances(cmd) => {
            let render = |i: &crate::scheduler::InstanceRecord| {
                format!(
                    "{}\t{}\t{}/{} slots\t{}\n",
                    i.instance_id,
                    serde_json::to_value(i.state).unwrap().as_str().unwrap_or("?"),
                    i.capacity_slots - i.free_slots().min(i.capacity_slots),
                    i.capacity_slots,
                    i.endpoint
                )
            };
            match cmd {
                InstancesCmd::List => {
                    let list = c.list_instances()?;
                    out.emit(&list, |l| l.iter().map(render).collect())?;
                }
                InstancesCmd::Create {
                    capacity,
                    reserved_by,
                    pinned,
                } => {
                    let config = InstanceConfig {
                        capacity_slots: *capacity,
                        reserved_by: reserved_by.clone(),
                        pinned: *pinned,
                        ..InstanceConfig::default()
                    };
                    out.emit(&c.create_instance(&config)?, render)?;
                }
                InstancesCmd::Stop { id } => out.emit(&c.stop_instance(id)?, render)?,
            }
        }
        Command::Models(cmd) => match cmd {
            ModelsCmd::List => {
                let list = c.list_models()?;
                out.emit(&list, |l| {
                    l.iter()
                        .map(|m| {
                            let versions: Vec<&str> = m.versions.iter().map(|v| v.id.as_str()).collect();
                            format!("{}\t{}\n", m.name, versions.join(" "))
                        })
                        .collect()
                })?;
            }
            ModelsCmd::Download { name, version, out: path } => {
                let v = version.as_deref().map(VersionId::from);
                let bytes = c.download_model(name, v.as_ref())?;
                std::fs::write(path, &bytes)?;
                let note = serde_json::json!({ "model": name, "path": path, "bytes": bytes.len() });
                out.emit(&note, |_| format!("wrote {} bytes to {}\n", bytes.len(), path.display()))?;
            }
        },
        Command::Report(cmd) => match cmd {
            ReportCmd::Show { key } => {
                let r = c.get_report(key)?;
                out.emit(&r, |r| format!("report {} @ {}\n{}", r.key, r.version, render_report(&r.report)))?;
            }
            ReportCmd::Confusion { key, level } => out.emit(&c.confusion(key, *level)?, render_matrix)?,
            ReportCmd::Cell {
                key,
                level,
                gold,
                pred,
                cursor,
                limit,
                all,
            } => {
                let mut page = c.confusion_cell(key, *level, gold, pred, cursor.as_deref(), *limit)?;
                if *all {
                    while let Some(next) = page.next_cursor.take() {
                        let more = c.confusion_cell(key, *level, gold, pred, Some(&next), *limit)?;
                        page.items.extend(more.items);
                        page.next_cursor = more.next_cursor;
                    }
                }
                out.emit(&page, |p| {
                    let mut s = format!("{} gold {} predicted {}: {} instances\n", p.level.as_str(), p.gold, p.pred, p.count);
                    for i in &p.items {
                        s += &format!("{}\t{}\t{}\n", i.utterance_id, i.token_index.map_or("-".into(), |t| t.to_string()), i.rendered_text);
                    }
                    if let Some(n) = &p.next_cursor {
                        s += &format!("next cursor {n}\n");
                    }
                    s
                })?;
            }
        },
        Command::Serve { .. } | Command::Worker { .. } => unreachable!("handled before opening a session"),
    }
    Ok(())
}

/// Parses `args` and runs the command. Returns the process exit code: 0 on
/// success, 1 on an API or job failure, 2 on a usage error.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let sink: &mut dyn Write = if code == 0 { stdout } else { stderr };
            let _ = write!(sink, "{}", e.render());
            return code;
        }
    };
    let mut out = Out { w: stdout, json: cli.json };
    match dispatch(&cli, &mut out) {
        Ok(()) => 0,
        Err(Failure(msg)) => {
            let _ = writeln!(stderr, "{msg}");
            1
        }
    }
}
