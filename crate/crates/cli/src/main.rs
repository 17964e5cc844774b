use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use scmoe_cli::{
    cmd_analyze, cmd_gradcheck, cmd_offload, cmd_schedule, cmd_simulate, cmd_train, Format, Options, Outcome, Result,
};

#[derive(Parser)]
#[command(name = "scmoe", version, about = "Shortcut-connected MoE laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a toy model; writes loss.csv, train.json and trace.json.
    Train(Common),
    /// Compare analytic and finite-difference gradients for every variant.
    Gradcheck(Common),
    /// Simulate expert-parallel strategies; writes timelines and a comparison.
    Simulate(Common),
    /// Pick the expert slot for a cost vector (path or inline JSON).
    Schedule(WithInput),
    /// Decode-time offloading: peak memory, latency and stalls.
    Offload(Common),
    /// Similarity and gating statistics of an activation trace.
    Analyze(WithInput),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Restrict `simulate` to one strategy label.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Args)]
struct WithInput {
    input: Option<String>,
    #[command(flatten)]
    common: Common,
}

impl Common {
    fn options(self, input: Option<String>) -> Options {
        Options {
            config: self.config,
            input,
            seed: self.seed,
            out: self.out,
            strategy: self.strategy,
            format: self.format,
        }
    }
}

fn run(cmd: Command) -> Result<Outcome> {
    match cmd {
        Command::Train(c) => cmd_train(&c.options(None)),
        Command::Gradcheck(c) => cmd_gradcheck(&c.options(None)),
        Command::Simulate(c) => cmd_simulate(&c.options(None)),
        Command::Schedule(w) => cmd_schedule(&w.common.options(w.input)),
        Command::Offload(c) => cmd_offload(&c.options(None)),
        Command::Analyze(w) => cmd_analyze(&w.common.options(w.input)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(o) => {
            print!("{}", o.stdout);
            let _ = std::io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            let body = serde_json::to_string(&e.report()).expect("error report serializes");
            eprintln!("{body}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
