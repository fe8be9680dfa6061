//! Single-binary driver: lens inspection, dataset generation, training,
//! rendering, evaluation, and benchmarking.
//!
//! Every subcommand prints exactly one JSON document on stdout (the
//! machine-readable run summary); human-oriented progress goes to stderr.
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod data;
mod inspect;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pltm::error::{Error, Result};
use pltm::lens::{builtin, parse_lens_system, LensSystem};
use pltm::trace::Direction;

#[derive(Parser)]
#[command(
    name = "pltm",
    version,
    about = "Per-lens light transport: ground-truth sequential ray tracing, factorized neural transport models, and two spectral renderers"
)]
struct Cli {
    /// Worker thread count for generation, training, and rendering
    /// (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a lens, validate it, and report its paraxial summary.
    Validate(inspect::ValidateArgs),
    /// Trace one canonical ray along a reflection path, optionally logging
    /// every surface event.
    Trace(inspect::TraceArgs),
    /// List the reflection paths a lens supports up to a bounce budget.
    EnumeratePaths(inspect::EnumArgs),
    /// Sample a transport dataset (MCMC valid set or balanced classifier
    /// set) and write it to disk.
    GenData(data::GenDataArgs),
    /// Train the classifier + regressor pair for one path and save the
    /// model.
    Train(data::TrainArgs),
    /// Render ghost flares of a collimated distant light through the lens.
    RenderFlare(render::FlareArgs),
    /// Render a procedural scene through the lens with depth of field.
    RenderDof(render::DofArgs),
    /// Compare two PFM renders with the MAPE metric.
    Eval(render::EvalArgs),
    /// Measure per-ray transport throughput, oracle vs neural.
    Bench(inspect::BenchArgs),
}

/// `--direction` values.
#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum DirArg {
    Forward,
    Backward,
}

impl From<DirArg> for Direction {
    fn from(d: DirArg) -> Direction {
        match d {
            DirArg::Forward => Direction::Forward,
            DirArg::Backward => Direction::Backward,
        }
    }
}

pub fn dir_label(d: Direction) -> &'static str {
    match d {
        Direction::Forward => "forward",
        Direction::Backward => "backward",
    }
}

/// Load a lens from a builtin name or a prescription file path.
pub fn load_lens(spec: &str) -> Result<LensSystem> {
    if let Some(text) = builtin(spec) {
        return parse_lens_system(text);
    }
    let text = std::fs::read_to_string(spec).map_err(|e| {
        Error::Parse(format!(
            "'{spec}' is not a builtin lens ({}) and reading it as a file failed: {e}",
            pltm::lens::builtin_names().join(", ")
        ))
    })?;
    parse_lens_system(&text)
}

/// Conventional output directory for one (lens, direction, path) triple:
/// `<out_dir>/<lens>-<hash>/<direction>/path-<id>`.
pub fn path_dir(out_dir: &std::path::Path, lens: &LensSystem, direction: Direction, path_id: u64) -> PathBuf {
    out_dir
        .join(format!("{}-{:016x}", lens.name, lens.hash()))
        .join(dir_label(direction))
        .join(format!("path-{path_id}"))
}

/// Parse `WxH` image sizes, e.g. `512x512`.
pub fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("'{s}' is not a WxH size"))?;
    let w: usize = w.trim().parse().map_err(|e| format!("bad width: {e}"))?;
    let h: usize = h.trim().parse().map_err(|e| format!("bad height: {e}"))?;
    if w == 0 || h == 0 {
        return Err("image size must be positive".into());
    }
    Ok((w, h))
}

/// Parse one path id; accepts decimal, `0x` hex, and `0b` binary.
pub fn parse_path_id(tok: &str) -> std::result::Result<u64, String> {
    let tok = tok.trim();
    let parsed = if let Some(hex) = tok.strip_prefix("0x") {
        u64::from_str_radix(hex, 16)
    } else if let Some(bin) = tok.strip_prefix("0b") {
        u64::from_str_radix(bin, 2)
    } else {
        tok.parse()
    };
    parsed.map_err(|e| format!("bad path id '{tok}': {e}"))
}

fn dispatch(cmd: Command) -> Result<serde_json::Value> {
    match cmd {
        Command::Validate(a) => inspect::validate(a),
        Command::Trace(a) => inspect::trace(a),
        Command::EnumeratePaths(a) => inspect::enumerate(a),
        Command::GenData(a) => data::gen_data(a),
        Command::Train(a) => data::train(a),
        Command::RenderFlare(a) => render::flare(a),
        Command::RenderDof(a) => render::dof(a),
        Command::Eval(a) => render::eval(a),
        Command::Bench(a) => inspect::bench(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: failed to configure {n} worker threads: {e}");
            return ExitCode::FAILURE;
        }
    }
    match dispatch(cli.command) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_and_path_lists_parse() {
        assert_eq!(parse_size("512x256").unwrap(), (512, 256));
        assert_eq!(parse_size("4X4").unwrap(), (4, 4));
        assert!(parse_size("512").is_err());
        assert!(parse_size("0x4").is_err());
        assert_eq!(parse_path_id("0 ").unwrap(), 0);
        assert_eq!(parse_path_id("0x18").unwrap(), 24);
        assert_eq!(parse_path_id("0b101").unwrap(), 5);
        assert!(parse_path_id("seven").is_err());
    }

    #[test]
    fn builtin_and_file_lenses_load() {
        let l = load_lens("gauss59").unwrap();
        assert_eq!(l.name, "gauss59");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("copy.json");
        std::fs::write(&path, l.to_json_string()).unwrap();
        let copy = load_lens(path.to_str().unwrap()).unwrap();
        assert_eq!(copy.hash(), l.hash());
        assert!(load_lens("no-such-lens").is_err());
    }

    #[test]
    fn cli_parses_representative_command_lines() {
        use clap::Parser as _;
        let cli = Cli::try_parse_from([
            "pltm",
            "--threads",
            "2",
            "render-dof",
            "--lens",
            "gauss59",
            "--spp",
            "8",
            "--size",
            "64x64",
        ])
        .unwrap();
        assert_eq!(cli.threads, Some(2));
        assert!(matches!(cli.command, Command::RenderDof(_)));
        assert!(Cli::try_parse_from(["pltm", "bogus-subcommand"]).is_err());
    }
}
