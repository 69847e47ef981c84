use clap::Parser;
use lightsign::cli::{run, Cli};

fn main() -> anyhow::Result<()> {
    let message = run(Cli::parse())?;
    println!("{message}");
    Ok(())
}
