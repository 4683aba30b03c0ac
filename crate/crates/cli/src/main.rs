use std::fs;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use commstance::eval::{compare_runs, read_aggregate_csv, RankingTask};
use commstance::graph::RetweetNetwork;
use commstance::lm::{serve, NGramModel};
use commstance::pipeline::{collect_reports, MpMode, Pipeline, PipelineError, RunConfig, Stage, StageOutcome};
use commstance::synth::{generate_scenario, ScenarioSpec};

#[derive(Parser)]
#[command(
    name = "commstance",
    version,
    about = "Community stance probing with retweet-graph message passing"
)]
struct Cli {
    /// worker threads for parallel stages (default: all cores)
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// more log output; repeat for debug
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// generate the input files from the configured scenario
    Synth(RunArgs),
    /// parse and filter tweets
    Ingest(RunArgs),
    /// build the co-sharing network and detect communities
    Communities(RunArgs),
    /// build the community retweet network
    RetweetNet(RunArgs),
    /// label users and compute community ideology mixes
    Ideology(RunArgs),
    /// train one language model per community
    Train(RunArgs),
    /// probe every model about every target
    Probe(RunArgs),
    /// score predicted stances against reweighted ground truth
    Evaluate(RunArgs),
    /// run every stage in order, skipping those already done
    All(RunArgs),
    /// compare evaluated runs side by side
    Compare(CompareArgs),
    /// render a retweet network as Graphviz DOT
    Dot(DotArgs),
    /// serve a saved model over stdin/stdout, one JSON request per line
    LmServe(ServeArgs),
    /// write a scenario's synthetic inputs into a directory
    Scenario(ScenarioArgs),
}

#[derive(Args)]
struct RunArgs {
    /// run configuration (TOML)
    #[arg(short, long)]
    config: PathBuf,
    /// override the message passing mode
    #[arg(long, value_enum)]
    mp: Option<MpArg>,
    /// override the seed list; repeat for several runs
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// override the cutoff, RFC 3339
    #[arg(long)]
    cutoff: Option<DateTime<Utc>>,
    #[arg(long)]
    min_followers: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MpArg {
    On,
    Off,
    Random,
}

impl From<MpArg> for MpMode {
    fn from(m: MpArg) -> Self {
        match m {
            MpArg::On => MpMode::On,
            MpArg::Off => MpMode::Off,
            MpArg::Random => MpMode::Random,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Target,
    Community,
}

#[derive(Args)]
struct CompareArgs {
    /// compare every mode evaluated under this work directory
    #[arg(long, conflicts_with = "runs")]
    workdir: Option<PathBuf>,
    /// `label=path` pairs of aggregate report CSVs
    runs: Vec<String>,
    #[arg(long, value_enum, default_value = "target")]
    task: TaskArg,
    /// also write the table as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct DotArgs {
    /// network JSON written by the retweet-net stage
    network: PathBuf,
    /// leave out edges lighter than this
    #[arg(long, default_value_t = 0.0)]
    min_weight: f64,
}

#[derive(Args)]
struct ServeArgs {
    /// model JSON written by the train stage
    model: PathBuf,
}

#[derive(Args)]
struct ScenarioArgs {
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Exit 1: the request is wrong. Exit 2: something failed while running.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match e.downcast_ref::<PipelineError>() {
        Some(p) if p.is_validation() => 1,
        _ => 2,
    }
}

fn pipeline(args: &RunArgs) -> Result<Pipeline> {
    if !args.config.is_file() {
        bail!(Usage(format!("no config file at {}", args.config.display())));
    }
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(m) = args.mp {
        cfg.params.mp = m.into();
    }
    if !args.seeds.is_empty() {
        cfg.params.seeds = args.seeds.clone();
    }
    if let Some(c) = args.cutoff {
        cfg.params.cutoff = Some(c);
    }
    if let Some(m) = args.min_followers {
        cfg.params.min_followers = m;
    }
    let p = Pipeline::new(cfg)?;
    info!("config hash {}", p.config_hash());
    Ok(p)
}

fn report(stage: Stage, outcome: &StageOutcome) {
    let what = match outcome {
        StageOutcome::Ran => "done",
        StageOutcome::Skipped => "up to date",
    };
    eprintln!("{stage}: {what}");
}

fn run_stage(args: &RunArgs, stage: Stage) -> Result<()> {
    let p = pipeline(args)?;
    let outcome = p.run_stage(stage)?;
    report(stage, &outcome);
    Ok(())
}

fn run_all(args: &RunArgs) -> Result<()> {
    let p = pipeline(args)?;
    for (stage, outcome) in p.run_all()? {
        report(stage, &outcome);
    }
    let summary = p.stage_dir(Stage::Evaluate).join("summary.txt");
    let text = fs::read_to_string(&summary).with_context(|| format!("reading {}", summary.display()))?;
    print!("{}", text.lines().skip(1).map(|l| format!("{l}\n")).collect::<String>());
    Ok(())
}

fn compare(args: &CompareArgs) -> Result<()> {
    let task = match args.task {
        TaskArg::Target => RankingTask::TargetSpecific,
        TaskArg::Community => RankingTask::CommunitySpecific,
    };
    let runs = match &args.workdir {
        Some(w) => collect_reports(w, task)?,
        None => {
            if args.runs.is_empty() {
                bail!(Usage("give --workdir or label=path pairs".into()));
            }
            let mut runs = Vec::new();
            for r in &args.runs {
                let (label, path) = r
                    .split_once('=')
                    .ok_or_else(|| Usage(format!("expected label=path, got {r:?}")))?;
                let file = fs::File::open(path).with_context(|| format!("opening {path}"))?;
                let reports: Vec<_> = read_aggregate_csv(BufReader::new(file))?
                    .into_iter()
                    .filter(|a| a.task == task)
                    .collect();
                runs.push((label.to_string(), reports));
            }
            runs
        }
    };
    let table = compare_runs(&runs).map_err(|e| Usage(e.to_string()))?;
    print!("{}", table.render_text());
    if let Some(path) = &args.csv {
        let mut w = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
        table.write_csv(&mut w, None)?;
        w.flush()?;
    }
    Ok(())
}

fn dot(args: &DotArgs) -> Result<()> {
    let text = fs::read_to_string(&args.network).with_context(|| format!("reading {}", args.network.display()))?;
    let net = RetweetNetwork::from_json(&text)?;
    print!("{}", net.to_dot(args.min_weight));
    Ok(())
}

fn lm_serve(args: &ServeArgs) -> Result<()> {
    let bytes = fs::read(&args.model).with_context(|| format!("reading {}", args.model.display()))?;
    let model = NGramModel::from_bytes(&bytes)?;
    let stdin = io::stdin();
    let stdout = io::stdout();
    serve(&model, stdin.lock(), BufWriter::new(stdout.lock()))?;
    Ok(())
}

fn scenario(args: &ScenarioArgs) -> Result<()> {
    let text = fs::read_to_string(&args.spec).with_context(|| format!("reading {}", args.spec.display()))?;
    let spec = ScenarioSpec::from_toml(&text).map_err(|e| Usage(e.to_string()))?;
    let sc = generate_scenario(&spec)?;
    sc.write_to(&args.out, None)?;
    eprintln!("wrote {} records to {}", sc.lines.len(), args.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            bail!(Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global()?;
    }
    match &cli.command {
        Cmd::Synth(a) => run_stage(a, Stage::Synth),
        Cmd::Ingest(a) => run_stage(a, Stage::Ingest),
        Cmd::Communities(a) => run_stage(a, Stage::Communities),
        Cmd::RetweetNet(a) => run_stage(a, Stage::RetweetNet),
        Cmd::Ideology(a) => run_stage(a, Stage::Ideology),
        Cmd::Train(a) => run_stage(a, Stage::Train),
        Cmd::Probe(a) => run_stage(a, Stage::Probe),
        Cmd::Evaluate(a) => run_stage(a, Stage::Evaluate),
        Cmd::All(a) => run_all(a),
        Cmd::Compare(a) => compare(a),
        Cmd::Dot(a) => dot(a),
        Cmd::LmServe(a) => lm_serve(a),
        Cmd::Scenario(a) => scenario(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
