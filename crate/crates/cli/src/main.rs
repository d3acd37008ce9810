mod args;
mod commands;

use std::ffi::OsString;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::Cli;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] cellgeo::Error),
    #[error("{0}")]
    Usage(String),
    /// A check ran to completion and did not pass.
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_io() => 2,
            _ => 1,
        }
    }
}

/// Splices the keys of a `--config` file in as `--key=value` right after
/// the subcommand, so flags given on the command line take precedence.
fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let mut path = None;
    for (i, a) in argv.iter().enumerate().skip(2) {
        let s = a.to_string_lossy();
        if let Some(p) = s.strip_prefix("--config=") {
            path = Some(OsString::from(p));
        } else if s == "--config" {
            path = Some(
                argv.get(i + 1)
                    .cloned()
                    .ok_or_else(|| CliError::Usage("--config needs a path".into()))?,
            );
        }
    }
    let Some(path) = path else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&path).map_err(cellgeo::Error::from)?;
    let kv = cellgeo::config::parse_key_values(&text)?;
    if kv.contains_key("config") {
        return Err(CliError::Usage("a config file cannot name another config file".into()));
    }
    let mut out: Vec<OsString> = argv[..2].to_vec();
    out.extend(kv.iter().map(|(k, v)| OsString::from(format!("--{}={v}", k.replace('_', "-")))));
    out.extend(argv[2..].iter().cloned());
    Ok(out)
}

fn run(argv: Vec<OsString>) -> Result<(), CliError> {
    let argv = if argv.len() > 2 { expand_config(argv)? } else { argv };
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.render().to_string())),
    };
    if let Some(n) = cli.command.common().threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    }
    commands::dispatch(cli.command)
}

fn main() -> ExitCode {
    match run(std::env::args_os().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string();
            let msg = msg.trim_end();
            if msg.starts_with("error:") {
                eprintln!("{msg}");
            } else {
                eprintln!("error: {msg}");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
