//! The `cdds` command line.
//!
//! Every invocation writes into a fresh run directory under `$CDDS_OUT`
//! (default `runs/`) holding the outputs and a `manifest.json` that can be
//! replayed with `--from-manifest`.

// Stdout writes that tolerate a closed pipe (`cdds eval | head -1`).
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

pub mod args;
pub mod error;
pub mod jobs;
pub mod profile;
pub mod run;

use std::ffi::OsString;

use clap::Parser;

pub use args::Cli;
pub use error::{CliError, CliResult};
pub use jobs::{resolve, run_job, Job};
pub use profile::Profile;
pub use run::{latest_run, out_root, read_manifest, RunManifest};

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let recorded = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli, recorded) {
        Ok(manifest) => {
            say!("run dir: {}", manifest.run_dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli, argv: Vec<String>) -> CliResult<RunManifest> {
    let root = out_root();
    let job = match (cli.from_manifest, cli.command) {
        (Some(path), _) => read_manifest(&path)?.job,
        (None, Some(cmd)) => resolve(&cmd, &root)?,
        (None, None) => return Err(CliError::Config("no command given; see --help".into())),
    };
    run_job(&job, argv, &root)
}
