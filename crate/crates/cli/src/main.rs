use clap::Parser;
use mmq_cli::{run, Cli, CliError};

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("MMQ_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Config(format!("MMQ_THREADS must be a positive integer, got `{v}`"))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = init_threads().and_then(|_| run(&cli)) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
