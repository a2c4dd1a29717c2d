//! Stage runners with file-based handoff, and the end-to-end driver.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::characteristics::{self, compute_sender_stats, SenderStats};
use crate::cluster::{self, kmeans, label_events, name_clusters, ClusterModel, DEFAULT_RESTARTS};
use crate::embed::{
    store::manifest_for, read_embeddings, slice_events, train_slices, tune_hyperparameters, write_embeddings, ActivityToken, EmbeddingManifest,
    SearchSpace, SgnsConfig, SliceEmbeddings, TuneResult,
};
use crate::error::{Error, Result};
use crate::factor::{self, FactorCount, FactorModel, FactorOptions};
use crate::ingest::{filter_corpus, parse_events, write_events, FilterPolicy};
use crate::json17;
use crate::synth::{generate_corpus, generate_factor_data, SynthCorpus, SynthSpec};
use crate::time::{self, WEEK};
use crate::trajectory::export::{export_trajectories, project_trajectories, Projection};
use crate::trajectory::project::TsneOptions;
use crate::trajectory::{analyze_token, candidate_tokens, AnalysisOptions, ReferencePattern, ReferenceSet, TokenAnalysis};
use crate::align::{align_chain, write_alignment};

pub const STAGES: [&str; 7] = ["ingest", "characterize", "efa", "cluster", "embed", "align", "analyze"];

pub const EVENTS_FILE: &str = "events.jsonl";
pub const SENDER_STATS_FILE: &str = "sender_stats.json";
pub const CHARS_FILE: &str = "chars.csv";
pub const MODEL_FILE: &str = "model.json";
pub const SCORES_FILE: &str = "scores.csv";
pub const LABELED_FILE: &str = "labeled.csv";
pub const ACTIVITY_FILE: &str = "activity.csv";
pub const CLUSTER_MODEL_FILE: &str = "cluster_model.json";
pub const EMBEDS_DIR: &str = "embeds";
pub const ALIGNED_DIR: &str = "aligned";
pub const TRAJECTORIES_FILE: &str = "trajectories.csv";
pub const ANALYSIS_FILE: &str = "analysis.json";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const TUNE_FILE: &str = "tune.json";

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(json17::to_string(value)?.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::schema(path, e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub parsed: usize,
    pub malformed: usize,
    pub kept: usize,
}

/// Parses and filters `input`. Sender statistics, when requested, are
/// computed over every parsed record before filtering.
pub fn run_ingest(input: &Path, policy: &FilterPolicy, output: &Path, stats_out: Option<&Path>) -> Result<IngestSummary> {
    let outcome = parse_events(open(input)?)?;
    for e in &outcome.errors {
        log::warn!("{}:{}: {}", input.display(), e.line, e.message);
    }
    let (kept, _) = filter_corpus(&outcome.records, policy);
    let mut w = create(output)?;
    write_events(&mut w, &kept)?;
    w.flush().map_err(|e| Error::io(output, e))?;
    if let Some(p) = stats_out {
        let stats = compute_sender_stats(&outcome.records);
        let mut sorted: Vec<&SenderStats> = stats.values().collect();
        sorted.sort_by(|a, b| a.sender_id.cmp(&b.sender_id));
        write_json(p, &sorted)?;
    }
    Ok(IngestSummary { parsed: outcome.records.len(), malformed: outcome.errors.len(), kept: kept.len() })
}

/// Characterizes `events` with statistics from `stats` (as written by
/// ingest) or, without one, from the events themselves.
pub fn run_characterize(events: &Path, stats: Option<&Path>, output: &Path) -> Result<usize> {
    let outcome = parse_events(open(events)?)?;
    if let Some(e) = outcome.errors.first() {
        return Err(Error::schema(events, format!("line {}: {}", e.line, e.message)));
    }
    let stats: HashMap<String, SenderStats> = match stats {
        Some(p) => read_json::<Vec<SenderStats>>(p)?.into_iter().map(|s| (s.sender_id.clone(), s)).collect(),
        None => compute_sender_stats(&outcome.records),
    };
    let rows = characteristics::characterize(&outcome.records, &stats)?;
    let mut w = create(output)?;
    characteristics::write_csv(&mut w, &rows)?;
    w.flush().map_err(|e| Error::io(output, e))?;
    Ok(rows.len())
}

/// `factors = None` keeps the eigenvalues above one.
pub fn run_efa(
    chars: &Path,
    factors: Option<usize>,
    names: Option<Vec<String>>,
    accept_unconverged: bool,
    model_out: &Path,
    scores_out: &Path,
) -> Result<FactorModel> {
    let events = characteristics::read_csv(open(chars)?, &chars.display().to_string())?;
    let options = FactorOptions { count: factors.map_or(FactorCount::Kaiser, FactorCount::Fixed), factor_names: names, accept_unconverged };
    let (model, scores) = factor::fit_characterized(&events, &options)?;
    write_json(model_out, &model)?;
    let mut w = create(scores_out)?;
    factor::write_scores_csv(&mut w, &scores.factor_names, &factor::scored_events(&events, &scores))?;
    w.flush().map_err(|e| Error::io(scores_out, e))?;
    Ok(model)
}

pub struct ClusterOutputs<'a> {
    pub labeled: &'a Path,
    pub activity: Option<&'a Path>,
    pub model: Option<&'a Path>,
}

pub fn run_cluster(scores: &Path, k: usize, seed: u64, restarts: usize, out: ClusterOutputs<'_>) -> Result<ClusterModel> {
    let (factor_names, events) = factor::read_scores_csv(open(scores)?, &scores.display().to_string())?;
    let points: Vec<Vec<f64>> = events.iter().map(|e| e.scores.clone()).collect();
    let mut clustering = kmeans(&points, k, seed, restarts)?;
    clustering.model.cluster_names = name_clusters(&clustering.model.centroids, &factor_names);
    clustering.model.factor_names = factor_names.clone();
    let labeled = label_events(&events, &clustering.assignments)?;
    let mut w = create(out.labeled)?;
    cluster::write_labeled_table(&mut w, &factor_names, &labeled)?;
    w.flush().map_err(|e| Error::io(out.labeled, e))?;
    if let Some(p) = out.activity {
        let mut w = create(p)?;
        cluster::write_activity_csv(&mut w, &factor_names, &labeled)?;
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    if let Some(p) = out.model {
        write_json(p, &clustering.model)?;
    }
    Ok(clustering.model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneConfig {
    pub enabled: bool,
    pub budget: usize,
    pub space: SearchSpace,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self { enabled: false, budget: 20, space: SearchSpace::default() }
    }
}

/// Slices labeled activity, optionally tunes, trains every non-empty slice
/// and writes the embedding set. Returns the manifest and any tuning record.
pub fn run_embed(activity: &Path, slice_len: i64, config: &SgnsConfig, tune: &TuneConfig, out_dir: &Path) -> Result<(EmbeddingManifest, Option<TuneResult>)> {
    let (_, labeled) = cluster::read_labeled_csv(open(activity)?, &activity.display().to_string())?;
    if labeled.iter().any(|a| a.subsystem.is_empty()) {
        log::warn!("{}: rows without a subsystem column share an empty subsystem", activity.display());
    }
    let slices = slice_events(&labeled, slice_len)?;
    let mut config = config.clone();
    let tuned = if tune.enabled {
        let result = tune_hyperparameters(&slices, &tune.space, &config, tune.budget, config.seed)?;
        config = result.best.clone();
        Some(result)
    } else {
        None
    };
    let trained = train_slices(&slices, &config)?;
    let manifest = manifest_for(&slices, &trained, &config);
    write_embeddings(out_dir, &manifest, &trained)?;
    if let Some(t) = &tuned {
        write_json(&out_dir.join(TUNE_FILE), t)?;
    }
    Ok((manifest, tuned))
}

/// Aligns the non-empty slices of an embedding set into the last one's frame.
pub fn run_align(embeds: &Path, out_dir: &Path) -> Result<Vec<usize>> {
    let (manifest, slices) = read_embeddings(embeds)?;
    for i in manifest.empty_slices() {
        log::warn!("slice {i} is empty and is left out of the alignment chain");
    }
    let (chain, aligned) = align_chain(&slices)?;
    write_alignment(out_dir, &manifest, &aligned, &chain)?;
    Ok(chain.shared_counts)
}

/// Which trained vectors represent a token during analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenVectors {
    #[default]
    Activity,
    /// Activity plus context vector.
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyzeConfig {
    pub vectors: TokenVectors,
    /// Center each aligned slice and scale its activity vectors to unit length before analysis.
    pub normalize: bool,
    /// Minimum present slices for a candidate token; `None` requires all.
    pub min_slices: Option<usize>,
    /// Most frequent candidates kept (after `track`).
    pub max_tokens: usize,
    /// Tokens always analyzed when present.
    pub track: Vec<ReferencePattern>,
    pub options: AnalysisOptions,
    pub projection: Projection,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            vectors: TokenVectors::Activity,
            normalize: true,
            min_slices: None,
            max_tokens: 40,
            track: vec![],
            options: AnalysisOptions::default(),
            projection: Projection::Tsne(TsneOptions::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenReport {
    pub token: ActivityToken,
    pub initialism: String,
    pub analysis: TokenAnalysis,
}

/// Subtracts the slice's mean activity vector, then scales rows to unit length.
pub fn normalize_rows(e: &mut SliceEmbeddings) {
    let mean = e.activity.row_mean();
    for mut row in e.activity.row_iter_mut() {
        row -= &mean;
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }
}

/// Picks analysis tokens: tracked ones first, then the most frequent
/// candidates (ties by token order) up to `max_tokens` in total.
pub fn select_tokens(aligned: &[SliceEmbeddings], reference: &ReferenceSet, config: &AnalyzeConfig) -> Vec<ActivityToken> {
    let min = config.min_slices.unwrap_or(aligned.len());
    let mut candidates = candidate_tokens(aligned, reference, min);
    let total = |t: &ActivityToken| -> usize { aligned.iter().filter_map(|e| e.position(t).map(|i| e.counts[i])).sum() };
    candidates.sort_by(|a, b| total(b).cmp(&total(a)).then_with(|| a.cmp(b)));
    let (mut chosen, rest): (Vec<_>, Vec<_>) = candidates.into_iter().partition(|t| config.track.iter().any(|p| p.matches(t)));
    for t in rest {
        if chosen.len() >= config.max_tokens {
            break;
        }
        chosen.push(t);
    }
    chosen
}

/// Analyzes selected tokens, projects their points and writes the
/// trajectory CSV plus a JSON report with every token's evidence.
pub fn run_analyze(
    aligned_dir: &Path,
    reference: &ReferenceSet,
    label_names: &[String],
    config: &AnalyzeConfig,
    csv_out: &Path,
    report_out: Option<&Path>,
) -> Result<Vec<TokenReport>> {
    let (_, mut aligned) = read_embeddings(aligned_dir)?;
    if config.vectors == TokenVectors::Sum {
        for e in aligned.iter_mut() {
            e.activity += &e.context;
        }
    }
    if config.normalize {
        aligned.iter_mut().for_each(normalize_rows);
    }
    let tokens = select_tokens(&aligned, reference, config);
    let results: Vec<(ActivityToken, Result<TokenAnalysis>)> =
        tokens.par_iter().map(|t| (t.clone(), analyze_token(t, reference, &aligned, &config.options))).collect();
    let mut analyses = Vec::new();
    for (t, r) in results {
        match r {
            Ok(a) => analyses.push(a),
            Err(e) => log::warn!("skipping {t}: {e}"),
        }
    }
    let coords = project_trajectories(&analyses, &config.projection)?;
    let mut w = create(csv_out)?;
    export_trajectories(&mut w, &analyses, coords.as_ref(), label_names)?;
    w.flush().map_err(|e| Error::io(csv_out, e))?;
    let reports: Vec<TokenReport> = analyses
        .into_iter()
        .map(|a| TokenReport { token: a.trajectory.token.clone(), initialism: a.trajectory.token.initialism(label_names), analysis: a })
        .collect();
    if let Some(p) = report_out {
        write_json(p, &reports)?;
    }
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageToggles {
    pub ingest: bool,
    pub characterize: bool,
    pub efa: bool,
    pub cluster: bool,
    pub embed: bool,
    pub align: bool,
    pub analyze: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self { ingest: true, characterize: true, efa: true, cluster: true, embed: true, align: true, analyze: true }
    }
}

impl StageToggles {
    pub fn enabled(&self, stage: &str) -> bool {
        match stage {
            "ingest" => self.ingest,
            "characterize" => self.characterize,
            "efa" => self.efa,
            "cluster" => self.cluster,
            "embed" => self.embed,
            "align" => self.align,
            "analyze" => self.analyze,
            _ => false,
        }
    }

    /// Enables only the stages from `first` on.
    pub fn from_stage(first: &str) -> Option<Self> {
        let at = STAGES.iter().position(|s| *s == first)?;
        let on = |s: &str| STAGES.iter().position(|x| *x == s).is_some_and(|i| i >= at);
        Some(Self {
            ingest: on("ingest"),
            characterize: on("characterize"),
            efa: on("efa"),
            cluster: on("cluster"),
            embed: on("embed"),
            align: on("align"),
            analyze: on("analyze"),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub input: PathBuf,
    pub out_dir: PathBuf,
    /// Reference set file, required by the analyze stage.
    pub reference: Option<PathBuf>,
    /// Seed for every stochastic stage (clustering, embedding, tuning, t-SNE).
    pub seed: Option<u64>,
    pub stages: StageToggles,
    pub filter: FilterPolicy,
    /// Factor count; `None` keeps eigenvalues above one.
    pub factors: Option<usize>,
    pub factor_names: Option<Vec<String>>,
    /// Use the last principal-axis iterate instead of failing when the iteration cap is hit.
    pub accept_unconverged: bool,
    pub k: usize,
    pub restarts: usize,
    #[serde(with = "time::duration_serde")]
    pub slice_len: i64,
    pub sgns: SgnsConfig,
    pub tune: TuneConfig,
    pub analyze: AnalyzeConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input: PathBuf::from("events.jsonl"),
            out_dir: PathBuf::from("out"),
            reference: Some(PathBuf::from("maintainers.json")),
            seed: Some(7),
            stages: StageToggles::default(),
            filter: FilterPolicy::default(),
            factors: Some(5),
            factor_names: None,
            accept_unconverged: true,
            k: 5,
            restarts: DEFAULT_RESTARTS,
            slice_len: WEEK,
            sgns: SgnsConfig::default(),
            tune: TuneConfig::default(),
            analyze: AnalyzeConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn output_paths(&self) -> Vec<PathBuf> {
        [
            EVENTS_FILE,
            SENDER_STATS_FILE,
            CHARS_FILE,
            MODEL_FILE,
            SCORES_FILE,
            LABELED_FILE,
            ACTIVITY_FILE,
            CLUSTER_MODEL_FILE,
            EMBEDS_DIR,
            ALIGNED_DIR,
            TRAJECTORIES_FILE,
            ANALYSIS_FILE,
            RUN_MANIFEST_FILE,
        ]
        .iter()
        .map(|n| self.path(n))
        .collect()
    }

    /// The config with the global seed pushed into every stochastic stage.
    pub fn seeded(&self) -> Self {
        let mut c = self.clone();
        if let Some(seed) = self.seed {
            c.sgns.seed = seed;
            if let Projection::Tsne(o) = &mut c.analyze.projection {
                o.seed = seed;
            }
        }
        c
    }
}

fn lexical(p: &Path) -> PathBuf {
    use std::path::Component;
    let mut out = PathBuf::new();
    for c in p.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                out.pop();
            }
            other => out.push(other),
        }
    }
    out
}

/// Every static problem with the config, in one list.
pub fn validate_config(config: &PipelineConfig) -> std::result::Result<(), Vec<String>> {
    let mut errs = Vec::new();
    let s = &config.stages;
    if !STAGES.iter().any(|st| s.enabled(st)) {
        errs.push("no stage is enabled".into());
    }
    let stochastic = s.cluster || s.embed || (s.analyze && matches!(config.analyze.projection, Projection::Tsne(_)));
    if stochastic && config.seed.is_none() {
        errs.push("seed is required when clustering, embedding or t-SNE is enabled".into());
    }
    if config.k < 1 {
        errs.push("k ≥ 1 required".into());
    }
    if config.restarts < 1 {
        errs.push("restarts ≥ 1 required".into());
    }
    if config.factors == Some(0) {
        errs.push("factors ≥ 1 required".into());
    }
    if let (Some(names), Some(m)) = (&config.factor_names, config.factors) {
        if names.len() != m {
            errs.push(format!("{} factor names given for {m} factors", names.len()));
        }
    }
    if config.slice_len <= 0 {
        errs.push("slice_len must be positive".into());
    }
    errs.extend(config.sgns.validate());
    if config.tune.enabled {
        if config.tune.budget < 1 {
            errs.push("tune budget ≥ 1 required".into());
        }
        if let Err(e) = config.tune.space.lower_bounds(&config.sgns) {
            errs.push(e.to_string());
        }
    }
    let a = &config.analyze;
    if a.max_tokens < 1 {
        errs.push("analyze.max_tokens ≥ 1 required".into());
    }
    if a.options.neighbors < 1 {
        errs.push("analyze.options.neighbors ≥ 1 required".into());
    }
    if let Projection::Tsne(o) = &a.projection {
        let expected_n = a.max_tokens * a.min_slices.unwrap_or(2).max(2);
        if !(o.perplexity > 0.0) || o.perplexity >= expected_n as f64 {
            errs.push(format!("t-SNE perplexity {} must be positive and below the expected point count {expected_n}", o.perplexity));
        }
        if o.iterations < 1 {
            errs.push("t-SNE iterations ≥ 1 required".into());
        }
    }
    if s.analyze && config.reference.is_none() {
        errs.push("analyze needs a reference set path".into());
    }
    let outputs: Vec<PathBuf> = config.output_paths().iter().map(|p| lexical(p)).collect();
    let mut inputs = vec![("input", lexical(&config.input))];
    if let Some(r) = &config.reference {
        inputs.push(("reference", lexical(r)));
    }
    if inputs.len() == 2 && inputs[0].1 == inputs[1].1 {
        errs.push("input and reference are the same path".into());
    }
    for (name, p) in &inputs {
        if outputs.iter().any(|o| o == p || p.starts_with(o)) {
            errs.push(format!("{name} path {} collides with a pipeline output", p.display()));
        }
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(errs)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// SHA-256 of a file, or of a directory's sorted `name sha256` lines.
pub fn digest_path(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut names: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
            .collect::<Result<_>>()?;
        names.sort();
        let mut h = Sha256::new();
        for n in names {
            let name = n.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            h.update(format!("{name} {}\n", digest_path(&n)?));
        }
        Ok(hex::encode(h.finalize()))
    } else {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}

fn digests(paths: &[PathBuf]) -> Result<Vec<FileDigest>> {
    paths.iter().map(|p| Ok(FileDigest { path: p.display().to_string(), sha256: digest_path(p)? })).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub version: String,
    pub status: StageStatus,
    pub wall_seconds: f64,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn completed(&self) -> Vec<&str> {
        self.stages.iter().filter(|s| s.status == StageStatus::Completed).map(|s| s.name.as_str()).collect()
    }
}

pub fn config_hash(config: &PipelineConfig) -> Result<String> {
    Ok(hex::encode(Sha256::digest(json17::to_string(config)?.as_bytes())))
}

fn stage_io(config: &PipelineConfig, stage: &str) -> (Vec<PathBuf>, Vec<PathBuf>) {
    let p = |n: &str| config.path(n);
    match stage {
        "ingest" => (vec![config.input.clone()], vec![p(EVENTS_FILE), p(SENDER_STATS_FILE)]),
        "characterize" => (vec![p(EVENTS_FILE), p(SENDER_STATS_FILE)], vec![p(CHARS_FILE)]),
        "efa" => (vec![p(CHARS_FILE)], vec![p(MODEL_FILE), p(SCORES_FILE)]),
        "cluster" => (vec![p(SCORES_FILE)], vec![p(LABELED_FILE), p(ACTIVITY_FILE), p(CLUSTER_MODEL_FILE)]),
        "embed" => (vec![p(ACTIVITY_FILE)], vec![p(EMBEDS_DIR)]),
        "align" => (vec![p(EMBEDS_DIR)], vec![p(ALIGNED_DIR)]),
        _ => {
            let mut inputs = vec![p(ALIGNED_DIR), p(CLUSTER_MODEL_FILE)];
            inputs.extend(config.reference.clone());
            (inputs, vec![p(TRAJECTORIES_FILE), p(ANALYSIS_FILE)])
        }
    }
}

fn run_stage(config: &PipelineConfig, stage: &str) -> Result<()> {
    let p = |n: &str| config.path(n);
    let seed = config.seed.unwrap_or_default();
    match stage {
        "ingest" => {
            let s = run_ingest(&config.input, &config.filter, &p(EVENTS_FILE), Some(&p(SENDER_STATS_FILE)))?;
            log::info!("ingest: {} parsed, {} malformed, {} kept", s.parsed, s.malformed, s.kept);
        }
        "characterize" => {
            run_characterize(&p(EVENTS_FILE), Some(&p(SENDER_STATS_FILE)), &p(CHARS_FILE))?;
        }
        "efa" => {
            run_efa(&p(CHARS_FILE), config.factors, config.factor_names.clone(), config.accept_unconverged, &p(MODEL_FILE), &p(SCORES_FILE))?;
        }
        "cluster" => {
            let out = ClusterOutputs { labeled: &p(LABELED_FILE), activity: Some(&p(ACTIVITY_FILE)), model: Some(&p(CLUSTER_MODEL_FILE)) };
            run_cluster(&p(SCORES_FILE), config.k, seed, config.restarts, out)?;
        }
        "embed" => {
            let dir = p(EMBEDS_DIR);
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            run_embed(&p(ACTIVITY_FILE), config.slice_len, &config.sgns, &config.tune, &dir)?;
        }
        "align" => {
            let dir = p(ALIGNED_DIR);
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            run_align(&p(EMBEDS_DIR), &dir)?;
        }
        "analyze" => {
            let path = config.reference.as_ref().ok_or_else(|| Error::InvalidInput("no reference set".into()))?;
            let reference = ReferenceSet::load(path)?;
            let model: ClusterModel = read_json(&p(CLUSTER_MODEL_FILE))?;
            run_analyze(&p(ALIGNED_DIR), &reference, &model.cluster_names, &config.analyze, &p(TRAJECTORIES_FILE), Some(&p(ANALYSIS_FILE)))?;
        }
        other => return Err(Error::InvalidInput(format!("unknown stage `{other}`"))),
    }
    Ok(())
}

/// Runs the enabled stages in order. On a stage failure the manifest is
/// written with the failed stage and the error carries the stage name;
/// outputs of earlier stages stay on disk.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunManifest> {
    validate_config(config).map_err(|errs| Error::InvalidInput(errs.join("; ")))?;
    let config = config.seeded();
    fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    let mut manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config_hash(&config)?,
        seed: config.seed,
        stages: Vec::new(),
    };
    let manifest_path = config.path(RUN_MANIFEST_FILE);
    for stage in STAGES {
        let (inputs, outputs) = stage_io(&config, stage);
        if !config.stages.enabled(stage) {
            manifest.stages.push(StageRecord {
                name: stage.into(),
                version: manifest.version.clone(),
                status: StageStatus::Skipped,
                wall_seconds: 0.0,
                inputs: vec![],
                outputs: vec![],
                error: None,
            });
            continue;
        }
        let started = Instant::now();
        let result = run_stage(&config, stage).and_then(|_| Ok((digests(&inputs)?, digests(&outputs)?)));
        let wall_seconds = started.elapsed().as_secs_f64();
        log::info!("{stage}: {wall_seconds:.2}s");
        match result {
            Ok((i, o)) => manifest.stages.push(StageRecord {
                name: stage.into(),
                version: manifest.version.clone(),
                status: StageStatus::Completed,
                wall_seconds,
                inputs: i,
                outputs: o,
                error: None,
            }),
            Err(e) => {
                manifest.stages.push(StageRecord {
                    name: stage.into(),
                    version: manifest.version.clone(),
                    status: StageStatus::Failed,
                    wall_seconds,
                    inputs: vec![],
                    outputs: vec![],
                    error: Some(e.to_string()),
                });
                write_json(&manifest_path, &manifest)?;
                return Err(Error::Stage { stage: stage.into(), source: Box::new(e) });
            }
        }
    }
    write_json(&manifest_path, &manifest)?;
    Ok(manifest)
}

/// Reads a config file; relative paths inside it resolve against its directory.
pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let mut c: PipelineConfig = read_json(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let fix = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    fix(&mut c.input);
    fix(&mut c.out_dir);
    if let Some(r) = c.reference.as_mut() {
        fix(r);
    }
    Ok(c)
}

pub const CORPUS_EVENTS_FILE: &str = "events.jsonl";
pub const CORPUS_TRUTH_FILE: &str = "truth.json";
pub const CORPUS_PLANT_FILE: &str = "plant.json";
pub const CORPUS_REFERENCE_FILE: &str = "maintainers.json";
pub const CORPUS_SPEC_FILE: &str = "spec.json";
pub const CORPUS_CONFIG_FILE: &str = "pipeline.json";
pub const FACTOR_X_FILE: &str = "factor_x.csv";
pub const FACTOR_SCORES_FILE: &str = "factor_scores.csv";
pub const FACTOR_LOADINGS_FILE: &str = "factor_loadings.csv";

/// Pipeline settings for a generated corpus in `corpus_dir`; outputs go to `corpus_dir/out`.
/// The planted sender, if any, is always analyzed.
pub fn synth_config(spec: &SynthSpec, corpus_dir: &Path) -> PipelineConfig {
    let mut c = PipelineConfig {
        input: corpus_dir.join(CORPUS_EVENTS_FILE),
        out_dir: corpus_dir.join("out"),
        reference: Some(corpus_dir.join(CORPUS_REFERENCE_FILE)),
        seed: Some(spec.seed),
        slice_len: spec.slice_len,
        ..PipelineConfig::default()
    };
    c.sgns.dim = 32;
    c.sgns.window = 2 * time::HOUR;
    c.sgns.subsample = 0.0;
    c.analyze.vectors = TokenVectors::Sum;
    if let Some(p) = &spec.plant {
        c.analyze.track = vec![ReferencePattern::sender(p.sender_id.clone())];
    }
    c
}

fn write_matrix(path: &Path, header: &[String], m: &nalgebra::DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(header)?;
    for i in 0..m.nrows() {
        w.write_record((0..m.ncols()).map(|j| m[(i, j)].to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Generates a corpus and writes it with its ground truth, factor data and a
/// matching pipeline config into `out_dir`.
pub fn run_synth(spec: &SynthSpec, out_dir: &Path) -> Result<SynthCorpus> {
    let corpus = generate_corpus(spec)?;
    let data = generate_factor_data(spec)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let events = out_dir.join(CORPUS_EVENTS_FILE);
    let mut w = create(&events)?;
    write_events(&mut w, &corpus.records)?;
    w.flush().map_err(|e| Error::io(&events, e))?;
    write_json(&out_dir.join(CORPUS_TRUTH_FILE), &corpus.truth)?;
    write_json(&out_dir.join(CORPUS_PLANT_FILE), &corpus.plant)?;
    write_json(&out_dir.join(CORPUS_REFERENCE_FILE), &corpus.reference)?;
    write_json(&out_dir.join(CORPUS_SPEC_FILE), spec)?;
    let mut config = synth_config(spec, Path::new(""));
    config.input = PathBuf::from(CORPUS_EVENTS_FILE);
    config.out_dir = PathBuf::from("out");
    config.reference = Some(PathBuf::from(CORPUS_REFERENCE_FILE));
    write_json(&out_dir.join(CORPUS_CONFIG_FILE), &config)?;
    let p = data.x.ncols();
    let x_names: Vec<String> = if p == characteristics::CHARACTERISTIC_NAMES.len() {
        characteristics::CHARACTERISTIC_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (1..=p).map(|j| format!("x{j}")).collect()
    };
    let f_names: Vec<String> = (1..=data.scores.ncols()).map(|j| format!("f{j}")).collect();
    write_matrix(&out_dir.join(FACTOR_X_FILE), &x_names, &data.x)?;
    write_matrix(&out_dir.join(FACTOR_SCORES_FILE), &f_names, &data.scores)?;
    write_matrix(&out_dir.join(FACTOR_LOADINGS_FILE), &f_names, &data.loadings)?;
    Ok(corpus)
}
