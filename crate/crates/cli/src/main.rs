use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use trust_motion::embed::SgnsConfig;
use trust_motion::ingest::FilterPolicy;
use trust_motion::pipeline::{self, AnalyzeConfig, ClusterOutputs, PipelineConfig, StageToggles, TuneConfig};
use trust_motion::synth::SynthSpec;
use trust_motion::time::parse_duration;
use trust_motion::trajectory::ReferenceSet;
use trust_motion::{json17, Error};

const EXIT_VALIDATION: u8 = 2;
const EXIT_STAGE: u8 = 3;

#[derive(Parser)]
#[command(name = "trust-motion", version, about = "Temporal activity embeddings and trust-ascendancy trajectories for mailing-list corpora")]
struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, env = "TRUST_MOTION_LOG", default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and filter a JSONL corpus.
    Ingest(IngestArgs),
    /// Compute per-event characteristic vectors.
    Characterize(CharacterizeArgs),
    /// Fit the factor model and write factor scores.
    Efa(EfaArgs),
    /// Cluster factor scores into activity types.
    Cluster(ClusterArgs),
    /// Train one embedding per time slice.
    Embed(EmbedArgs),
    /// Align consecutive slice embeddings.
    Align(AlignArgs),
    /// Trajectories, drift and proximity analysis against a reference set.
    Analyze(AnalyzeArgs),
    /// Generate a synthetic corpus with ground truth.
    Synth(SynthArgs),
    /// Run every enabled stage from one config.
    Pipeline(PipelineArgs),
    /// Check a pipeline config without running it.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long, env = "TRUST_MOTION_INPUT")]
    input: PathBuf,
    #[arg(long, env = "TRUST_MOTION_OUTPUT")]
    output: PathBuf,
    /// Sender statistics over all parsed records.
    #[arg(long, env = "TRUST_MOTION_STATS")]
    stats: Option<PathBuf>,
    /// Filter policy JSON; defaults apply when omitted.
    #[arg(long, env = "TRUST_MOTION_POLICY")]
    policy: Option<PathBuf>,
}

#[derive(Args)]
struct CharacterizeArgs {
    #[arg(long, env = "TRUST_MOTION_EVENTS")]
    events: PathBuf,
    #[arg(long, env = "TRUST_MOTION_STATS")]
    stats: Option<PathBuf>,
    #[arg(long, env = "TRUST_MOTION_OUTPUT")]
    output: PathBuf,
}

#[derive(Args)]
struct EfaArgs {
    #[arg(long, env = "TRUST_MOTION_CHARS")]
    chars: PathBuf,
    /// Fixed factor count; eigenvalues above one when omitted.
    #[arg(long, env = "TRUST_MOTION_FACTORS")]
    factors: Option<usize>,
    /// Comma-separated factor names.
    #[arg(long, env = "TRUST_MOTION_FACTOR_NAMES", value_delimiter = ',')]
    names: Option<Vec<String>>,
    #[arg(long, env = "TRUST_MOTION_ACCEPT_UNCONVERGED")]
    accept_unconverged: bool,
    #[arg(long, env = "TRUST_MOTION_MODEL")]
    model: PathBuf,
    #[arg(long, env = "TRUST_MOTION_SCORES")]
    scores: PathBuf,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long, env = "TRUST_MOTION_SCORES")]
    scores: PathBuf,
    #[arg(long, env = "TRUST_MOTION_K", default_value_t = 5)]
    k: usize,
    #[arg(long, env = "TRUST_MOTION_SEED")]
    seed: u64,
    #[arg(long, env = "TRUST_MOTION_RESTARTS", default_value_t = 50)]
    restarts: usize,
    #[arg(long, env = "TRUST_MOTION_LABELED")]
    labeled: PathBuf,
    /// Labeled rows with subsystems, the input of `embed`.
    #[arg(long, env = "TRUST_MOTION_ACTIVITY")]
    activity: Option<PathBuf>,
    #[arg(long, env = "TRUST_MOTION_MODEL")]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long, env = "TRUST_MOTION_ACTIVITY")]
    activity: PathBuf,
    #[arg(long, env = "TRUST_MOTION_SLICE_LEN", default_value = "1w", value_parser = duration)]
    slice_len: i64,
    /// SGNS config JSON; defaults apply when omitted.
    #[arg(long, env = "TRUST_MOTION_SGNS")]
    sgns: Option<PathBuf>,
    #[arg(long, env = "TRUST_MOTION_SEED")]
    seed: Option<u64>,
    /// Search hyperparameters before training.
    #[arg(long, env = "TRUST_MOTION_TUNE")]
    tune: bool,
    #[arg(long, env = "TRUST_MOTION_TUNE_BUDGET", default_value_t = 20)]
    budget: usize,
    #[arg(long, env = "TRUST_MOTION_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct AlignArgs {
    #[arg(long, env = "TRUST_MOTION_EMBEDS")]
    embeds: PathBuf,
    #[arg(long, env = "TRUST_MOTION_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long, env = "TRUST_MOTION_ALIGNED")]
    aligned: PathBuf,
    #[arg(long, env = "TRUST_MOTION_REFERENCE")]
    reference: PathBuf,
    /// Cluster model whose names label tokens; numeric labels otherwise.
    #[arg(long, env = "TRUST_MOTION_CLUSTER_MODEL")]
    cluster_model: Option<PathBuf>,
    /// Analysis config JSON; defaults apply when omitted.
    #[arg(long, env = "TRUST_MOTION_ANALYZE")]
    config: Option<PathBuf>,
    #[arg(long, env = "TRUST_MOTION_TRAJECTORIES")]
    trajectories: PathBuf,
    #[arg(long, env = "TRUST_MOTION_REPORT")]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Generator spec JSON; defaults apply when omitted.
    #[arg(long, env = "TRUST_MOTION_SPEC")]
    spec: Option<PathBuf>,
    #[arg(long, env = "TRUST_MOTION_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "TRUST_MOTION_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long, env = "TRUST_MOTION_CONFIG")]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long, env = "TRUST_MOTION_SEED")]
    seed: Option<u64>,
    /// Run this stage and everything after it.
    #[arg(long, env = "TRUST_MOTION_FROM_STAGE")]
    from_stage: Option<String>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long, env = "TRUST_MOTION_CONFIG")]
    config: PathBuf,
}

fn duration(s: &str) -> Result<i64, String> {
    parse_duration(s).map_err(|e| e.to_string())
}

fn load<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    match path {
        Some(p) => Ok(pipeline::read_json(p)?),
        None => Ok(T::default()),
    }
}

enum Failure {
    Validation(Vec<String>),
    Stage(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Stage(e)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Stage(e.into())
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    print!("{}", json17::to_string(value)?);
    Ok(())
}

fn pipeline_config(path: &Path, seed: Option<u64>, from_stage: Option<&str>) -> Result<PipelineConfig, Failure> {
    let mut config = pipeline::load_config(path).map_err(|e| Failure::Validation(vec![format!("{}: {e}", path.display())]))?;
    if seed.is_some() {
        config.seed = seed;
    }
    if let Some(stage) = from_stage {
        config.stages = StageToggles::from_stage(stage).ok_or_else(|| Failure::Validation(vec![format!("unknown stage `{stage}`")]))?;
    }
    pipeline::validate_config(&config).map_err(Failure::Validation)?;
    Ok(config)
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Ingest(a) => {
            let policy: FilterPolicy = load(a.policy.as_deref())?;
            let s = pipeline::run_ingest(&a.input, &policy, &a.output, a.stats.as_deref())?;
            print_json(&s)?;
        }
        Command::Characterize(a) => {
            let n = pipeline::run_characterize(&a.events, a.stats.as_deref(), &a.output)?;
            log::info!("{n} events characterized");
        }
        Command::Efa(a) => {
            if a.factors == Some(0) {
                return Err(Failure::Validation(vec!["factors ≥ 1 required".into()]));
            }
            let model = pipeline::run_efa(&a.chars, a.factors, a.names, a.accept_unconverged, &a.model, &a.scores)?;
            log::info!("{} factors, converged: {}", model.factor_names.len(), model.converged);
        }
        Command::Cluster(a) => {
            let mut errs = Vec::new();
            if a.k < 1 {
                errs.push("k ≥ 1 required".to_string());
            }
            if a.restarts < 1 {
                errs.push("restarts ≥ 1 required".to_string());
            }
            if !errs.is_empty() {
                return Err(Failure::Validation(errs));
            }
            let out = ClusterOutputs { labeled: &a.labeled, activity: a.activity.as_deref(), model: a.model.as_deref() };
            let model = pipeline::run_cluster(&a.scores, a.k, a.seed, a.restarts, out)?;
            log::info!("inertia {}", model.inertia);
        }
        Command::Embed(a) => {
            let mut sgns: SgnsConfig = load(a.sgns.as_deref())?;
            if let Some(seed) = a.seed {
                sgns.seed = seed;
            }
            let mut errs = sgns.validate();
            if a.slice_len <= 0 {
                errs.push("slice_len must be positive".into());
            }
            if !errs.is_empty() {
                return Err(Failure::Validation(errs));
            }
            let tune = TuneConfig { enabled: a.tune, budget: a.budget, ..TuneConfig::default() };
            let (manifest, tuned) = pipeline::run_embed(&a.activity, a.slice_len, &sgns, &tune, &a.out)?;
            log::info!("{} slices embedded", manifest.slices.len());
            if let Some(t) = tuned {
                log::info!("tuned objective {}", t.objective);
            }
        }
        Command::Align(a) => {
            let skipped = pipeline::run_align(&a.embeds, &a.out)?;
            if !skipped.is_empty() {
                log::warn!("slices without an alignment: {skipped:?}");
            }
        }
        Command::Analyze(a) => {
            let config: AnalyzeConfig = load(a.config.as_deref())?;
            let reference = ReferenceSet::load(&a.reference)?;
            let names = match &a.cluster_model {
                Some(p) => pipeline::read_json::<trust_motion::cluster::ClusterModel>(p)?.cluster_names,
                None => Vec::new(),
            };
            let reports = pipeline::run_analyze(&a.aligned, &reference, &names, &config, &a.trajectories, a.report.as_deref())?;
            for r in &reports {
                let c = &r.analysis.classification;
                println!("{}\t{}\t{}", r.token, c.class.as_str(), c.evidence.rho.map_or("NA".to_string(), |v| format!("{v:.3}")));
            }
        }
        Command::Synth(a) => {
            let mut spec: SynthSpec = load(a.spec.as_deref())?;
            if let Some(seed) = a.seed {
                spec.seed = seed;
            }
            let errs = spec.validate();
            if !errs.is_empty() {
                return Err(Failure::Validation(errs));
            }
            let corpus = pipeline::run_synth(&spec, &a.out)?;
            log::info!("{} records written to {}", corpus.records.len(), a.out.display());
        }
        Command::Pipeline(a) => {
            let config = pipeline_config(&a.config, a.seed, a.from_stage.as_deref())?;
            let manifest = pipeline::run_pipeline(&config)?;
            log::info!("completed stages: {}", manifest.completed().join(", "));
        }
        Command::Validate(a) => {
            pipeline_config(&a.config, None, None)?;
            println!("ok");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(errs)) => {
            for e in errs {
                eprintln!("invalid: {e}");
            }
            ExitCode::from(EXIT_VALIDATION)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_STAGE)
        }
    }
}

