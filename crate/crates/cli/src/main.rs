use clap::Parser;
use pslfm_cli::{run, Cli};

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let cfg = cli.resolve()?;
    log::info!("{} -> {}", cfg.command.name(), cfg.out.display());
    for path in run(&cfg)? {
        println!("{}", path.display());
    }
    Ok(())
}
