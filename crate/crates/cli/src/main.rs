use std::net::{IpAddr, SocketAddr};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rwprop_cli::commands::{self, CliError, GradcheckArgs, MccheckArgs, PropagateArgs, TrainArgs};
use rwprop_cli::service;

/// Random-walk label propagation with learnable boundaries.
#[derive(Debug, Parser)]
#[command(name = "rwprop", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Propagate sparse labels through a boundary field.
    Propagate(PropagateArgs),
    /// Jointly learn a boundary field and a per-pixel predictor.
    Train(TrainArgs),
    /// Compare adjoint gradients with finite differences on a random instance.
    Gradcheck(GradcheckArgs),
    /// Compare propagation with a Monte-Carlo random walker on a random instance.
    Mccheck(MccheckArgs),
    /// Run the HTTP API.
    Serve {
        #[arg(long, default_value = service::DEFAULT_HOST)]
        host: IpAddr,
        #[arg(long, default_value_t = service::DEFAULT_PORT)]
        port: u16,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Propagate(args) => commands::propagate(&args),
        Command::Train(args) => commands::train_cmd(&args),
        Command::Gradcheck(args) => commands::gradcheck(&args),
        Command::Mccheck(args) => commands::mccheck(&args),
        Command::Serve { host, port } => {
            let runtime = tokio::runtime::Runtime::new()
                .map_err(|e| CliError::Usage(format!("cannot start runtime: {e}")))?;
            runtime
                .block_on(service::serve(SocketAddr::new(host, port)))
                .map_err(|e| CliError::Usage(format!("{host}:{port}: {e}")))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
