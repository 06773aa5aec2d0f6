use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hrseg::synth::Task;
use hrseg::train::ModelKind;
use hrseg::Error;

mod commands;
mod config;

use config::{parse_crop, RunConfig};

#[derive(Parser)]
#[command(name = "hrseg", version, about = "High-resolution damage segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset.
    Gen(Flags),
    /// Train a model and keep the best-validation checkpoint.
    Train(Flags),
    /// Score a checkpoint on a dataset split.
    Eval(Flags),
    /// Write predicted masks and overlays for images.
    Infer(Flags),
    /// Compare activation memory of compound and direct models.
    Bench(Flags),
    /// Run the finite-difference gradient suite.
    Gradcheck(Flags),
}

/// Flags override the values of `--config`.
#[derive(Args, Clone, Debug, Default)]
struct Flags {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    ai: Option<usize>,
    #[arg(long, value_parser = parse_crop)]
    crop: Option<(usize, usize)>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    /// Number of scenes for `gen`.
    #[arg(long)]
    count: Option<usize>,
    /// Scene size for `gen`.
    #[arg(long, value_parser = parse_crop)]
    size: Option<(usize, usize)>,
}

impl Flags {
    fn resolve(&self) -> hrseg::Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(t) = &self.task {
            c.task = Task::parse(t)?;
        }
        if let Some(m) = &self.model {
            c.model = Some(ModelKind::parse(m)?);
        }
        if let Some(a) = self.ai {
            c.ai = a;
        }
        if self.crop.is_some() {
            c.crop = self.crop;
        }
        if let Some(e) = self.epochs {
            c.epochs = e;
        }
        for (dst, src) in [
            (&mut c.out, &self.out),
            (&mut c.dataset, &self.dataset),
            (&mut c.checkpoint, &self.checkpoint),
            (&mut c.input, &self.input),
        ] {
            if src.is_some() {
                dst.clone_from(src);
            }
        }
        if let Some(n) = self.count {
            c.gen.count = n;
        }
        if let Some((w, h)) = self.size {
            c.gen.width = w;
            c.gen.height = h;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Exit status and short code of an error.
fn classify(e: &Error) -> (u8, &'static str) {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Unsupported(_) => (2, "config"),
        Error::Io { .. } | Error::Format { .. } | Error::Json(_) | Error::ShapeMismatch { .. } | Error::InvalidShape { .. } => {
            (3, "data")
        }
        Error::NonFinite(_) | Error::Numerical(_) | Error::Diverged { .. } | Error::OutOfMemory { .. } => (4, "numerical"),
    }
}

fn threads() -> hrseg::Result<()> {
    let Ok(v) = std::env::var("HRS_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("HRS_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> hrseg::Result<()> {
    threads()?;
    let (name, flags) = match &cli.cmd {
        Cmd::Gen(f) => ("gen", f),
        Cmd::Train(f) => ("train", f),
        Cmd::Eval(f) => ("eval", f),
        Cmd::Infer(f) => ("infer", f),
        Cmd::Bench(f) => ("bench", f),
        Cmd::Gradcheck(f) => ("gradcheck", f),
    };
    let cfg = flags.resolve()?;
    match cli.cmd {
        Cmd::Gen(_) => commands::gen(&cfg),
        Cmd::Train(_) => commands::train(&cfg),
        Cmd::Eval(_) => commands::eval(&cfg),
        Cmd::Infer(_) => commands::infer(&cfg),
        Cmd::Bench(_) => commands::bench(&cfg),
        Cmd::Gradcheck(_) => commands::gradcheck(&cfg),
    }
    .map_err(|e| {
        eprintln!("hrseg {name} failed");
        e
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error code=2 kind=config: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = classify(&e);
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error code={code} kind={kind}: {msg}");
            ExitCode::from(code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(classify(&Error::Config("x".into())).0, 2);
        assert_eq!(classify(&Error::Format { kind: "PGM", pos: 0, msg: "x".into() }).0, 3);
        assert_eq!(classify(&Error::NonFinite("x".into())).0, 4);
        assert_eq!(classify(&Error::Diverged { epoch: 1, step: 2, last_good: None }).0, 4);
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"seed": 5, "epochs": 2, "task": "damage-state"}"#).unwrap();
        let f = Flags { config: Some(p), seed: Some(9), crop: Some((64, 32)), ..Flags::default() };
        let c = f.resolve().unwrap();
        assert_eq!((c.seed, c.epochs, c.task, c.crop), (9, 2, Task::DamageState, Some((64, 32))));
    }
}
