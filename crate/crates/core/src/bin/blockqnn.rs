use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use blockqnn::agent::{Baseline, Shaping};
use blockqnn::app::{
    self, block_argument, parse_schedule, AppError, EvaluatorChoice, Mode, NodeAddress, RunConfig, Transport,
};
use blockqnn::evaluation::ConnectionContext;
use blockqnn::runtime::{compute_node_serve, DispatchOrder};
use blockqnn::search::RewardSignal;

#[derive(Parser)]
#[command(name = "blockqnn", version, about = "Block-wise architecture search with tabular Q-learning")]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search for a block.
    SearchBlock(SearchArgs),
    /// Search for how instances of a fixed block connect.
    SearchConnection {
        /// Block to connect: canonical text, a file holding it, or an exported architecture.
        #[arg(long)]
        block: String,
        /// Network template the connections are built in.
        #[arg(long, default_value = "cifar")]
        template: String,
        #[command(flatten)]
        search: SearchArgs,
    },
    /// Label sampled blocks and train the accuracy predictor on them.
    TrainPredictor {
        #[command(flatten)]
        search: SearchArgs,
        #[command(flatten)]
        predictor: PredictorArgs,
    },
    /// Search with the predictor standing in for training.
    SearchWithPredictor {
        #[command(flatten)]
        search: SearchArgs,
        #[command(flatten)]
        predictor: PredictorArgs,
    },
    /// Run Q-learning and uniform random sampling on equal budgets.
    CompareRandom(SearchArgs),
    /// Write the best structures of a search run as architecture documents.
    Export {
        /// Search run directory.
        #[arg(long)]
        from: PathBuf,
        #[arg(long, default_value_t = 1)]
        top: usize,
        /// Block repetitions per stage.
        #[arg(long, default_value_t = 4)]
        repeats: u32,
        /// Output directory [default: <run>-export].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a run directory without touching it.
    Report {
        #[arg(long)]
        from: PathBuf,
    },
    /// Run again from a config snapshot.
    Rerun {
        #[arg(long)]
        config: PathBuf,
        /// Output directory [default: the snapshot's].
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
    },
    /// Serve evaluation jobs over TCP until a shutdown message arrives.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7070")]
        listen: String,
        #[command(flatten)]
        evaluator: EvaluatorArgs,
    },
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory [default: $BLOCKQNN_OUTPUT_ROOT/<mode>-seed<seed>].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue the run in the output directory from its last checkpoint.
    #[arg(long)]
    resume: bool,
    /// Epsilon stages as epsilon:iterations pairs, e.g. 1.0:95,0.9:7.
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Training epochs per evaluation.
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long, value_enum)]
    signal: Option<SignalArg>,
    /// FLOPs weight of the composite reward.
    #[arg(long)]
    mu: Option<f64>,
    /// Density weight of the composite reward.
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, value_enum)]
    baseline: Option<BaselineArg>,
    /// Learn from the terminal reward only.
    #[arg(long)]
    no_shaping: bool,
    /// Structures kept in top.json.
    #[arg(long)]
    top: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<u32>,
    #[command(flatten)]
    evaluator: EvaluatorArgs,
    #[command(flatten)]
    transport: TransportArgs,
}

#[derive(Args)]
struct EvaluatorArgs {
    /// Trainer address speaking the job/result protocol; the surrogate is used when absent.
    #[arg(long)]
    trainer: Option<String>,
    #[arg(long, default_value_t = 600_000)]
    trainer_timeout_ms: u64,
}

#[derive(Args)]
struct TransportArgs {
    /// Remote compute node, host:port[@capacity]; repeat for more. Simulated nodes are used when absent.
    #[arg(long = "node")]
    nodes: Vec<String>,
    #[arg(long, default_value_t = 600_000)]
    node_timeout_ms: u64,
    /// Simulated node count.
    #[arg(long, default_value_t = 8)]
    sim_nodes: usize,
    /// Concurrent jobs per simulated node.
    #[arg(long, default_value_t = 4)]
    capacity: usize,
    #[arg(long, value_enum, default_value_t = OrderArg::Fifo)]
    order: OrderArg,
}

#[derive(Args)]
struct PredictorArgs {
    /// Trained predictor to search with instead of training one.
    #[arg(long)]
    predictor: Option<PathBuf>,
    /// Labeled curves to train on (JSON lines) instead of sampling.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    holdout: Option<usize>,
    /// Passes over the training set.
    #[arg(long)]
    train_epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SignalArg {
    Composite,
    Accuracy,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    None,
    ReplayMean,
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderArg {
    Fifo,
    LongestFirst,
}

impl SearchArgs {
    fn config(&self, mode: Mode) -> Result<RunConfig, AppError> {
        let out = self.out.clone().unwrap_or_else(|| RunConfig::default_output(mode, self.seed));
        let mut c = RunConfig::new(mode, self.seed, out);
        c.resume = self.resume;
        let s = &mut c.search;
        if let Some(text) = &self.schedule {
            s.schedule = parse_schedule(text)?;
        }
        set(&mut s.batch_size, self.batch_size);
        set(&mut s.epochs, self.epochs);
        if let Some(sig) = self.signal {
            s.signal = match sig {
                SignalArg::Composite => RewardSignal::Composite,
                SignalArg::Accuracy => RewardSignal::Accuracy,
            };
        }
        set(&mut s.reward.mu, self.mu);
        set(&mut s.reward.rho, self.rho);
        set(&mut s.learning.alpha, self.alpha);
        set(&mut s.learning.gamma, self.gamma);
        if let Some(b) = self.baseline {
            s.learning.baseline = match b {
                BaselineArg::None => Baseline::None,
                BaselineArg::ReplayMean => Baseline::ReplayMean,
            };
        }
        if self.no_shaping {
            s.learning.shaping = Shaping::Unshaped;
        }
        set(&mut c.top, self.top);
        set(&mut c.checkpoint_every, self.checkpoint_every);
        c.evaluator = self.evaluator.choice();
        c.transport = self.transport.transport()?;
        Ok(c)
    }
}

impl EvaluatorArgs {
    fn choice(&self) -> EvaluatorChoice {
        match &self.trainer {
            Some(endpoint) => EvaluatorChoice::External { endpoint: endpoint.clone(), timeout_ms: self.trainer_timeout_ms },
            None => EvaluatorChoice::default(),
        }
    }
}

impl TransportArgs {
    fn transport(&self) -> Result<Transport, AppError> {
        if self.nodes.is_empty() {
            let order = match self.order {
                OrderArg::Fifo => DispatchOrder::Fifo,
                OrderArg::LongestFirst => DispatchOrder::LongestFirst,
            };
            return Ok(Transport::Simulated {
                nodes: self.sim_nodes,
                capacity: self.capacity,
                latency: Default::default(),
                order,
            });
        }
        let nodes = self.nodes.iter().map(|n| n.parse::<NodeAddress>()).collect::<Result<_, _>>()?;
        Ok(Transport::Socket { nodes, timeout_ms: self.node_timeout_ms })
    }
}

impl PredictorArgs {
    fn apply(&self, c: &mut RunConfig) {
        let p = &mut c.predictor;
        p.checkpoint = self.predictor.clone();
        p.dataset = self.dataset.clone();
        set(&mut p.samples, self.samples);
        set(&mut p.holdout, self.holdout);
        set(&mut p.train.epochs, self.train_epochs);
        set(&mut p.train.learning_rate, self.learning_rate);
        if self.max_steps.is_some() {
            p.train.max_steps = self.max_steps;
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn config(command: Command) -> Result<Option<RunConfig>, AppError> {
    let c = match command {
        Command::SearchBlock(a) => a.config(Mode::SearchBlock)?,
        Command::SearchConnection { block, template, search } => {
            let mut c = search.config(Mode::SearchConnection)?;
            c.search.connection = Some(ConnectionContext { block: block_argument(&block)?, template });
            c
        }
        Command::TrainPredictor { search, predictor } => {
            let mut c = search.config(Mode::TrainPredictor)?;
            predictor.apply(&mut c);
            c
        }
        Command::SearchWithPredictor { search, predictor } => {
            let mut c = search.config(Mode::SearchWithPredictor)?;
            predictor.apply(&mut c);
            c
        }
        Command::CompareRandom(a) => a.config(Mode::CompareRandom)?,
        Command::Export { from, top, repeats, out } => {
            let out = out.unwrap_or_else(|| {
                let mut name = from.file_name().unwrap_or_default().to_os_string();
                name.push("-export");
                from.with_file_name(name)
            });
            let mut c = RunConfig::new(Mode::Export, 0, out);
            c.source = Some(from);
            c.top = top;
            c.repeats = repeats;
            c
        }
        Command::Report { from } => {
            let mut c = RunConfig::new(Mode::Report, 0, PathBuf::new());
            c.source = Some(from);
            c
        }
        Command::Rerun { config, out, resume } => {
            let mut c = RunConfig::load(&config)?;
            set(&mut c.output, out);
            c.resume = resume;
            c
        }
        Command::Serve { listen, evaluator } => {
            let listener = TcpListener::bind(&listen).map_err(|e| AppError::runtime(&listen, e))?;
            eprintln!("serving on {listen}");
            let stats = compute_node_serve(listener, evaluator.choice().build(), Arc::new(AtomicBool::new(false)))
                .map_err(|e| AppError::runtime(&listen, e))?;
            eprintln!("{stats:?}");
            return Ok(None);
        }
    };
    Ok(Some(c))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = config(cli.command).and_then(|c| c.map(|c| app::run(&c)).transpose());
    match result {
        Ok(Some(summary)) => {
            print!("{}", summary.text);
            if let Some(dir) = summary.output {
                println!("wrote {} files under {}", summary.files.len(), dir.display());
            }
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("blockqnn: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
