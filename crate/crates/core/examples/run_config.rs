//! Drive an experiment from a TOML configuration, as the `effdiff` binary
//! does, and list the files it wrote.
//!
//! ```text
//! cargo run --release --example run_config -- configs/one_d_profile.toml [out_dir]
//! ```

use std::path::PathBuf;

use effective_diffusion::config::{self, Overrides};

fn main() {
    let mut args = std::env::args().skip(1);
    let path = PathBuf::from(args.next().unwrap_or_else(|| "configs/one_d_profile.toml".into()));
    let ov = Overrides { out: args.next().map(PathBuf::from), ..Default::default() };
    let result = config::load(&path).and_then(|c| c.resolve(&ov)).and_then(|res| {
        println!("{}", config::validation_report(&res));
        config::run(&res)
    });
    match result {
        Ok(outcome) => {
            for f in outcome.files {
                println!("wrote {}", f.display());
            }
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            std::process::exit(e.exit_code());
        }
    }
}
