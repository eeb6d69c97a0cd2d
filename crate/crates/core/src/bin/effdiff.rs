use std::path::PathBuf;

use clap::Parser;
use effective_diffusion::config::{main_with, Overrides, Profile};

/// Run an experiment described by a TOML configuration file.
#[derive(Parser)]
#[command(name = "effdiff", version)]
struct Args {
    /// Configuration file.
    config: PathBuf,
    /// Resolve and print the configuration without running it.
    #[arg(long)]
    validate: bool,
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    workers: Option<usize>,
    /// Base seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the configuration and EFFDIFF_OUT_DIR.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ProfileArg {
    Desk,
    Full,
}

fn main() {
    let args = Args::parse();
    if let Some(n) = args.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("{{\"error\":\"workers\",\"message\":\"{e}\"}}");
        }
    }
    let ov = Overrides {
        profile: args.profile.map(|p| match p {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Full => Profile::Full,
        }),
        seed: args.seed,
        out: args.out,
    };
    std::process::exit(main_with(&args.config, args.validate, &ov));
}
