use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use attack_search::attack::Budget;
use attack_search::dsl;
use attack_search::io::write_atomic;
use attack_search::metrics::{evaluate, EvalOptions, EvalReport, EvalTiming};
use attack_search::model::{
    make_defended, make_fixture_dataset, train_fixture, Arch, Classifier, Dataset, DefenseConfig, FixtureKind,
    TrainConfig,
};
use attack_search::search::{greedy_sequence_search, SearchConfig};
use attack_search::Error;

#[derive(Parser)]
#[command(name = "attack-search", version, about = "Search for adaptive adversarial attacks on small classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic 8x8 fixture dataset.
    MakeDataset {
        #[arg(long, value_enum, default_value = "bars")]
        kind: Kind,
        #[arg(long, default_value_t = 400)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a fixture network on a dataset.
    TrainFixture {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "mlp")]
        arch: ArchArg,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Add defenses (and optionally a detector) to a model.
    Defend {
        #[arg(long)]
        model: PathBuf,
        /// TOML file with `defenses = [...]` and an optional `[detector]`.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Search for an attack sequence and a surrogate transformation.
    Search(SearchArgs),
    /// Run a program and write the full evaluation report.
    Attack(AttackArgs),
    /// Run a program and print the robust error summary.
    Evaluate(AttackArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Bars,
    Blobs,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Mlp,
    Cnn,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Directory for report.json, report.txt, program.txt, surrogate.model and timing.json.
    #[arg(long)]
    out_dir: PathBuf,
    /// TOML search configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the small preset (m=2, k=16, n=50).
    #[arg(long)]
    desk_scale: bool,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Per-sample, per-attack wall-clock budget T_c in seconds.
    #[arg(long)]
    budget_sec: Option<f64>,
    /// Per-sample, per-attack query budget.
    #[arg(long)]
    budget_queries: Option<u64>,
    /// Trials per round (k).
    #[arg(long)]
    trials: Option<usize>,
    /// Initial sample-set size (n).
    #[arg(long)]
    init_samples: Option<usize>,
    /// Sequence length (m).
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Worker threads (0 = one per core).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args, Clone)]
struct AttackArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Attack program file.
    #[arg(long)]
    program: PathBuf,
    /// Surrogate model written by `search`; defaults to the model itself.
    #[arg(long)]
    surrogate: Option<PathBuf>,
    #[arg(long, default_value_t = 8.0 / 255.0)]
    eps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluations per sample for randomized models.
    #[arg(long, default_value_t = 10)]
    draws: usize,
    #[arg(long)]
    budget_sec: Option<f64>,
    #[arg(long)]
    budget_queries: Option<u64>,
    /// Output directory (attack) or summary JSON path (evaluate).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

enum Failure {
    Config(String),
    Parse(String),
    Runtime(String),
    Budget(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Parse(_) => 3,
            Failure::Runtime(_) => 4,
            Failure::Budget(_) => 5,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Config(m) => format!("error (config): {m}"),
            Failure::Parse(m) => format!("error (parse): {m}"),
            Failure::Runtime(m) => format!("error (runtime): {m}"),
            Failure::Budget(m) => format!("error (budget): {m}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let m = e.to_string();
        match e {
            Error::Config(_) | Error::InvalidParam(_) | Error::Io { .. } | Error::Format { .. } => Failure::Config(m),
            Error::Parse { .. } | Error::Range(_) => Failure::Parse(m),
            _ => Failure::Runtime(m),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::from(Error::io(path, e)))
}

fn write_text(path: &Path, text: &str) -> Outcome {
    Ok(write_atomic(path, text.as_bytes())?)
}

fn to_json<T: Serialize>(value: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| Failure::Runtime(e.to_string()))
}

fn create_dir(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir).map_err(|e| Failure::from(Error::io(dir, e)))
}

fn budget(seconds: Option<f64>, queries: Option<u64>) -> Result<Budget, Failure> {
    if let Some(s) = seconds {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Failure::Config(format!("--budget-sec must be positive, got {s}")));
        }
    }
    if queries == Some(0) {
        return Err(Failure::Config("--budget-queries must be positive".into()));
    }
    // Without any flag the per-attack limit is one second.
    Ok(match (seconds, queries) {
        (None, None) => Budget::seconds(1.0),
        _ => Budget { seconds, queries },
    })
}

fn search(args: SearchArgs) -> Outcome {
    let mut config = match &args.config {
        Some(p) => toml::from_str::<SearchConfig>(&read_text(p)?).map_err(|e| Failure::Config(e.to_string()))?,
        None if args.desk_scale => SearchConfig::desk(),
        None => SearchConfig::default(),
    };
    if args.desk_scale {
        let desk = SearchConfig::desk();
        (config.m, config.k, config.n) = (desk.m, desk.k, desk.n);
    }
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {$(if let Some(v) = args.$flag { config.$field = v; })*};
    }
    set!(eps => eps, seed => seed, trials => k, init_samples => n, seq_len => m, lambda => lambda);
    if args.budget_sec.is_some() || args.budget_queries.is_some() {
        let b = budget(args.budget_sec, args.budget_queries)?;
        config.budget_seconds = b.seconds;
        config.budget_queries = b.queries;
    }
    config.jobs = args.jobs;
    config.validate()?;

    let model = Classifier::load(&args.model)?;
    let data = Dataset::load(&args.data)?;
    let outcome = greedy_sequence_search(&model, &data, &config)?;
    create_dir(&args.out_dir)?;
    let dir = &args.out_dir;
    write_text(&dir.join("report.json"), &to_json(&outcome.report)?)?;
    write_text(&dir.join("timing.json"), &to_json(&outcome.timing)?)?;
    let mut summary = format!(
        "transform: {}\nclean-correct samples: {}\n",
        outcome.report.transform.summary, outcome.report.clean_correct
    );
    for r in &outcome.report.rounds {
        summary.push_str(&format!(
            "round {}: {} remaining, winner {}, broke {}\n",
            r.round,
            r.remaining,
            r.winner.map(|w| format!("trial {w} ({})", r.trials[w].program)).unwrap_or_else(|| "none".into()),
            r.broken
        ));
    }
    if let Some(s) = &outcome.report.early_stop {
        summary.push_str(&format!("stopped early: {s}\n"));
    }
    summary.push_str(&format!("program:\n{}\n", outcome.report.program));
    write_text(&dir.join("report.txt"), &summary)?;
    let surrogate = Classifier::new(outcome.surrogate, model.detector);
    write_atomic(&dir.join("surrogate.model"), &surrogate.to_bytes()?)?;
    if outcome.program.attacks.is_empty() {
        return Err(Failure::Budget(
            outcome.report.early_stop.unwrap_or_else(|| "no attack found".into()),
        ));
    }
    write_text(&dir.join("program.txt"), &(outcome.report.program.clone() + "\n"))?;
    print!("{summary}");
    Ok(())
}

fn run_program(args: &AttackArgs) -> Result<(EvalReport, EvalTiming), Failure> {
    let model = Classifier::load(&args.model)?;
    let data = Dataset::load(&args.data)?;
    let program = dsl::parse(&read_text(&args.program)?)?;
    let surrogate = match &args.surrogate {
        Some(p) => Classifier::load(p)?.graph,
        None => model.graph.clone(),
    };
    if !(args.eps >= 0.0 && args.eps.is_finite()) {
        return Err(Failure::Config(format!("--eps must be non-negative, got {}", args.eps)));
    }
    let options = EvalOptions {
        eps: args.eps,
        seed: args.seed,
        draws: args.draws.max(1),
        budget: budget(args.budget_sec, args.budget_queries)?,
        jobs: args.jobs,
    };
    Ok(evaluate(&model, &surrogate, &program, &data, &options)?)
}

fn attack(args: AttackArgs) -> Outcome {
    let Some(dir) = args.out.clone() else {
        return Err(Failure::Config("attack needs --out <directory>".into()));
    };
    let (report, timing) = run_program(&args)?;
    create_dir(&dir)?;
    write_text(&dir.join("timing.json"), &to_json(&timing)?)?;
    write_text(&dir.join("eval.json"), &report.to_json()?)?;
    write_text(&dir.join("eval.txt"), &report.to_text())?;
    write_text(&dir.join("eval.csv"), &report.to_csv())?;
    let a = &report.aggregates;
    println!(
        "robust error {:.4}  robust accuracy {:.4}  attack success {}",
        a.rerr,
        a.robust_accuracy,
        a.asr.map(|v| format!("{v:.4}")).unwrap_or_else(|| "undefined".into())
    );
    Ok(())
}

#[derive(Serialize)]
struct Summary<'a> {
    program: &'a str,
    eps: f64,
    seed: u64,
    draws: usize,
    samples: usize,
    rerr: f64,
    robust_accuracy: f64,
    asr: Option<f64>,
}

fn evaluate_cmd(args: AttackArgs) -> Outcome {
    let (report, _) = run_program(&args)?;
    let a = &report.aggregates;
    let summary = Summary {
        program: &report.program,
        eps: report.options.eps,
        seed: report.options.seed,
        draws: report.draws,
        samples: a.samples,
        rerr: a.rerr,
        robust_accuracy: a.robust_accuracy,
        asr: a.asr,
    };
    if let Some(path) = &args.out {
        write_text(path, &to_json(&summary)?)?;
    }
    println!("rerr {:.4}\nrobust_accuracy {:.4}", a.rerr, a.robust_accuracy);
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::MakeDataset { kind, n, seed, out } => {
            let kind = match kind {
                Kind::Bars => FixtureKind::Bars,
                Kind::Blobs => FixtureKind::Blobs,
            };
            Ok(make_fixture_dataset(kind, n, seed)?.save(&out)?)
        }
        Command::TrainFixture {
            data,
            arch,
            epochs,
            lr,
            batch,
            seed,
            out,
        } => {
            let arch = match arch {
                ArchArg::Mlp => Arch::Mlp,
                ArchArg::Cnn => Arch::Cnn,
            };
            let config = TrainConfig {
                epochs,
                learning_rate: lr,
                batch_size: batch,
                seed,
            };
            Ok(train_fixture(&Dataset::load(&data)?, arch, &config)?.save(&out)?)
        }
        Command::Defend { model, config, out } => {
            let cfg = DefenseConfig::parse(&read_text(&config)?)?;
            let m = Classifier::load(&model)?;
            Ok(make_defended(&m, &cfg.defenses, cfg.detector)?.save(&out)?)
        }
        Command::Search(args) => search(args),
        Command::Attack(args) => attack(args),
        Command::Evaluate(args) => evaluate_cmd(args),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.message());
            ExitCode::from(f.code())
        }
    }
}
