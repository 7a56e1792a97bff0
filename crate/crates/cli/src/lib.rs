//! The `ssa-crnn` command line: argument definitions, config resolution,
//! command dispatch and exit-code mapping.

pub mod config;
pub mod iemocap;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ssacrnn::container;
use ssacrnn::evaluation::{render_plans, synth_corpus, SynthConfig};
use ssacrnn::features::manifest;
use ssacrnn::par::Execution;
use ssacrnn::pipeline::{cmd_eval, cmd_features, cmd_train, fold_plans, RunConfig};
use ssacrnn::Error;

pub use config::{FileConfig, CACHE_ENV, VERSION};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_MISSING: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "ssa-crnn", version, about = "Speaker-attentive speech emotion recognition pipeline")]
pub struct Cli {
    /// Log level when RUST_LOG is unset.
    #[arg(long, global = true, default_value = "info")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract and cache log-Mel features for every manifest entry.
    Features(RunArgs),
    /// Train every fold (or one) of the configured variant.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Train only this fold (1-based).
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Score trained folds and write the report.
    Eval(RunArgs),
    /// Generate a synthetic corpus with a manifest, speaker list and config.
    Synth(SynthArgs),
    /// Print the fold plans.
    Folds(RunArgs),
    /// Print the resolved config in canonical form.
    Config(RunArgs),
    /// Write a manifest and speaker list for an IEMOCAP release.
    ManifestIemocap {
        /// Directory holding Session1 .. Session5.
        #[arg(long)]
        root: PathBuf,
        /// Output manifest; the speaker list goes next to it.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Config file.
    #[arg(short, long)]
    pub config: PathBuf,
    /// Override a config key, e.g. `--set max_epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Run on one thread.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub speakers: usize,
    #[arg(long, default_value_t = 5)]
    pub utterances_per_cell: usize,
    /// Per-emotion utterance multipliers, e.g. `8,1,1,1`.
    #[arg(long, value_delimiter = ',')]
    pub class_weights: Option<Vec<usize>>,
    #[arg(long, default_value_t = 1.0)]
    pub emotion_contrast: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub folds: usize,
}

/// A failure with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Invalid(_) | Error::ShapeMismatch { .. } | Error::InvalidShape { .. } => EXIT_CONFIG,
        Error::MissingArtifact(_) => EXIT_MISSING,
        Error::Manifest { .. }
        | Error::Audio(_)
        | Error::Wav(_)
        | Error::Format(_)
        | Error::EmptyClass(_)
        | Error::NonFinite { .. }
        | Error::Json(_)
        | Error::Io(_) => EXIT_DATA,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

impl RunArgs {
    /// File keys, then the cache environment variable, then flags.
    pub fn resolve(&self) -> Result<(FileConfig, RunConfig), Error> {
        let mut overrides = self.overrides.clone();
        if let Some(v) = &self.variant {
            overrides.push(format!("variant=\"{v}\""));
        }
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        if self.sequential {
            overrides.push("parallel=false".into());
        }
        let file = FileConfig::load(&self.config, &overrides)?;
        let base = self.config.parent().unwrap_or(Path::new("."));
        let cache = self
            .cache_dir
            .clone()
            .or_else(|| std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from));
        let mut run = file.to_run_config(base, cache)?;
        if let Some(o) = &self.output_dir {
            run.output_dir = o.clone();
        }
        Ok((file, run))
    }
}

fn synth(a: &SynthArgs) -> Result<String, Error> {
    let cfg = SynthConfig {
        speakers: a.speakers,
        utterances_per_cell: a.utterances_per_cell,
        class_weights: a.class_weights.clone().unwrap_or_else(|| vec![1; SynthConfig::default().emotions.len()]),
        emotion_contrast: a.emotion_contrast,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let corpus = synth_corpus(&cfg, &a.out, Execution::Parallel)?;
    let config_path = a.out.join("config.toml");
    if !config_path.exists() {
        let file = FileConfig {
            manifest: "manifest.tsv".into(),
            speakers: Some("speakers.tsv".into()),
            cache_dir: "cache".into(),
            output_dir: "runs".into(),
            layout: "synthetic".into(),
            synthetic_folds: a.folds,
            mode: Some("loso".into()),
            seed: a.seed,
            emotions: cfg.emotions.clone(),
            ..FileConfig::default()
        };
        container::write_atomic(&config_path, file.canonical().as_bytes())?;
    }
    Ok(format!(
        "{} utterances, {} speakers\nmanifest\t{}\nspeakers\t{}\nconfig\t{}\n",
        corpus.entries.len(),
        corpus.speakers.len(),
        corpus.manifest_path.display(),
        corpus.speakers_path.display(),
        config_path.display()
    ))
}

fn features(run: &RunConfig) -> Result<String, Error> {
    let r = cmd_features(run)?;
    if r.utterances == 0 && !r.errors.is_empty() {
        return Err(Error::Audio(format!("no utterance could be read ({} errors)", r.errors.len())));
    }
    let mut out = format!(
        "utterances {}\tsegments {}\twritten {}\tskipped {}\terrors {}\n",
        r.utterances,
        r.segments,
        r.written,
        r.skipped,
        r.errors.len()
    );
    for e in &r.errors {
        out.push_str(&format!("error\t{}\t{}\n", e.utterance_id, e.message));
    }
    Ok(out)
}

fn train(run: &RunConfig, fold: Option<usize>) -> Result<String, Error> {
    let mut out = String::new();
    for f in cmd_train(run, fold)? {
        if let Some(sp) = &f.sp {
            out.push_str(&format!(
                "fold {}\tsp\tepoch {}\tuar {:.4}\t{}\n",
                f.fold,
                sp.best_epoch,
                sp.best_uar,
                sp.checkpoint.display()
            ));
        }
        out.push_str(&format!(
            "fold {}\tem\tepoch {}\tuar {:.4}\t{}\n",
            f.fold,
            f.em.best_epoch,
            f.em.best_uar,
            f.em.checkpoint.display()
        ));
    }
    Ok(out)
}

fn folds(run: &RunConfig) -> Result<String, Error> {
    let entries = if run.speakers.is_some() { Vec::new() } else { manifest::read(&run.manifest)? };
    let (_, plans) = fold_plans(run, &entries)?;
    Ok(render_plans(&plans))
}

fn manifest_iemocap(root: &Path, out: &Path) -> Result<String, Error> {
    let (entries, speakers) = iemocap::build(root)?;
    let base = out.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(base)?;
    container::write_atomic(out, manifest::render(&entries, base).as_bytes())?;
    let speakers_path = out.with_file_name("speakers.tsv");
    container::write_atomic(&speakers_path, speakers.as_bytes())?;
    Ok(format!("{} utterances\nspeakers\t{}\n", entries.len(), speakers_path.display()))
}

/// Runs a parsed command and returns what it prints on success.
pub fn run(cli: &Cli) -> Result<String, Failure> {
    let out = match &cli.command {
        Command::Features(a) => features(&a.resolve()?.1)?,
        Command::Train { run, fold } => train(&run.resolve()?.1, *fold)?,
        Command::Eval(a) => cmd_eval(&a.resolve()?.1)?.text,
        Command::Synth(a) => synth(a)?,
        Command::Folds(a) => folds(&a.resolve()?.1)?,
        Command::Config(a) => a.resolve()?.0.canonical(),
        Command::ManifestIemocap { root, out } => manifest_iemocap(root, out)?,
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_kind() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::MissingArtifact("x".into())), EXIT_MISSING);
        assert_eq!(exit_code(&Error::Manifest { line: 3, reason: "x".into() }), EXIT_DATA);
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), EXIT_DATA);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
