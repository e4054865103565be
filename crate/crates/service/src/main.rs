use clap::Parser;
use imeforge_service::{run, ServeArgs};

#[derive(Parser)]
#[command(name = "imeforge-serve", about = "Decode and selection-feedback HTTP service")]
struct Cli {
    #[command(flatten)]
    serve: ServeArgs,
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    run(&cli.serve)?;
    Ok(())
}
