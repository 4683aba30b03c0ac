//! Resumable stage runner over plain files.
//!
//! Every stage writes into its own directory under the work directory and
//! finishes by writing `manifest.json`. The manifest records a hash of the
//! stage's parameters and inputs; the same hash is embedded in each artifact
//! the stage wrote. Running a stage whose manifest hash matches and whose
//! outputs are intact does nothing.
//!
//! ```text
//! synth -> ingest -> communities -> retweet-net -> ideology -> train -> probe -> evaluate
//! ```
//!
//! `train`, `probe` and `evaluate` keep one directory per message passing
//! mode, so runs with `mp = "on"`, `"off"` and `"random"` share everything
//! upstream and can be compared afterwards.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::community::{louvain_partition, top_k_communities, Community, CommunityError, Partition};
use crate::corpus::{build_corpora, CorpusError};
use crate::eval::{
    aggregate, community_specific_report, compare_runs, read_aggregate_csv, target_specific_report, truth_matrix,
    write_aggregate_csv, write_units_csv, AggregateReport, EvalError, GroundTruthTable, RankingReport, RankingTask,
};
use crate::graph::{
    build_community_retweet_network, build_cosharing_network, randomize_retweet_weights, GraphError, RetweetNetwork,
};
use crate::ideology::{ideology_fractions, label_users, FileLabeler, IdeologyError, IdeologyMix, LexiconLabeler};
use crate::ingest::{filter_active_sharers, read_inputs, IngestError, TweetStore};
use crate::lm::{train_all, CommunityLm, LmError, NGramConfig, NGramModel, TrainingSchedule};
use crate::probe::{
    build_stance_matrix, bundled_targets, read_targets, LexiconScorer, ProbeConfig, ProbeError, RemoteConfig,
    RemoteScorer, SentimentScorer, StanceMatrix, Target,
};
use crate::seed;
use crate::synth::{generate_scenario, ScenarioSpec, SynthError};
use crate::CommunityId;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("config file: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("stage `{needed}` has not been run; run it before `{stage}`")]
    MissingStage { stage: Stage, needed: Stage },
    #[error("artifacts of stage `{needed}` are out of date for this configuration; rerun `{needed}` before `{stage}`")]
    StaleStage { stage: Stage, needed: Stage },
    #[error("stage `{stage}`: {message}")]
    Failed { stage: Stage, message: String },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Community(#[from] CommunityError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Ideology(#[from] IdeologyError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// Problems the user fixes by changing the config or the order of
    /// commands, as opposed to failures while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            PipelineError::Invalid(_)
                | PipelineError::Toml(_)
                | PipelineError::MissingStage { .. }
                | PipelineError::StaleStage { .. }
        )
    }
}

type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn invalid(msg: impl Into<String>) -> PipelineError {
    PipelineError::Invalid(msg.into())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| PipelineError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn create_file(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|source| PipelineError::File {
            path: path.to_path_buf(),
            source,
        })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Synth,
    Ingest,
    Communities,
    RetweetNet,
    Ideology,
    Train,
    Probe,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Synth,
        Stage::Ingest,
        Stage::Communities,
        Stage::RetweetNet,
        Stage::Ideology,
        Stage::Train,
        Stage::Probe,
        Stage::Evaluate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::Communities => "communities",
            Stage::RetweetNet => "retweet-net",
            Stage::Ideology => "ideology",
            Stage::Train => "train",
            Stage::Probe => "probe",
            Stage::Evaluate => "evaluate",
        }
    }

    fn upstream(self, cfg: &RunConfig) -> Vec<Stage> {
        let synth = cfg.scenario.is_some();
        let mut up = match self {
            Stage::Synth => vec![],
            Stage::Ingest => vec![],
            Stage::Communities => vec![Stage::Ingest],
            Stage::RetweetNet => vec![Stage::Ingest, Stage::Communities],
            Stage::Ideology => vec![Stage::Ingest, Stage::Communities],
            Stage::Train => {
                let mut v = vec![Stage::Ingest, Stage::Communities, Stage::Ideology];
                if cfg.params.mp != MpMode::Off {
                    v.push(Stage::RetweetNet);
                }
                v
            }
            Stage::Probe => vec![Stage::Train],
            Stage::Evaluate => vec![Stage::Communities, Stage::Ideology, Stage::Probe],
        };
        // synthetic inputs stand in for the raw files
        if synth && matches!(self, Stage::Ingest | Stage::Ideology | Stage::Probe | Stage::Evaluate) {
            up.insert(0, Stage::Synth);
        }
        up
    }

    /// Whether the stage keeps separate outputs per message passing mode.
    fn per_mode(self) -> bool {
        matches!(self, Stage::Train | Stage::Probe | Stage::Evaluate)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = PipelineError;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MpMode {
    #[default]
    On,
    Off,
    Random,
}

impl MpMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MpMode::On => "on",
            MpMode::Off => "off",
            MpMode::Random => "random",
        }
    }
}

impl FromStr for MpMode {
    type Err = PipelineError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "on" => Ok(MpMode::On),
            "off" => Ok(MpMode::Off),
            "random" => Ok(MpMode::Random),
            _ => Err(invalid(format!("mp must be on, off or random, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    #[default]
    Lexicon,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IdeologySource {
    /// `user_label` fields already present in the input records
    Input,
    /// a `user_id,label` CSV given as `labels`
    File,
    /// majority lean of the outlets each user links
    Outlets,
}

fn d_min_followers() -> u64 {
    100
}
fn d_resolution() -> f64 {
    1.0
}
fn d_top_k() -> usize {
    20
}
fn d_order() -> usize {
    3
}
fn d_smoothing() -> f64 {
    0.01
}
fn d_min_count() -> u64 {
    2
}
fn d_total_steps() -> u32 {
    10
}
fn d_mp_interval() -> u32 {
    5
}
fn d_n() -> usize {
    1000
}
fn d_keep() -> usize {
    850
}
fn d_max_tokens() -> usize {
    32
}
fn d_top_n_eval() -> usize {
    10
}
fn d_seeds() -> Vec<u64> {
    (0..5).collect()
}
fn d_in_flight() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Params {
    /// tweets at or after this instant are dropped
    #[serde(default)]
    pub cutoff: Option<DateTime<Utc>>,
    #[serde(default = "d_min_followers")]
    pub min_followers: u64,
    #[serde(default = "d_resolution")]
    pub resolution: f64,
    #[serde(default)]
    pub louvain_seed: u64,
    #[serde(default = "d_top_k")]
    pub top_k: usize,
    #[serde(default = "d_order")]
    pub order: usize,
    #[serde(default = "d_smoothing")]
    pub smoothing: f64,
    #[serde(default = "d_min_count")]
    pub min_count: u64,
    /// total epochs, `x`
    #[serde(default = "d_total_steps")]
    pub total_steps: u32,
    /// epochs between message passing rounds, `y`
    #[serde(default = "d_mp_interval")]
    pub mp_interval: u32,
    #[serde(default = "d_n")]
    pub n: usize,
    #[serde(default = "d_keep")]
    pub keep: usize,
    #[serde(default = "d_max_tokens")]
    pub max_tokens: usize,
    #[serde(default = "d_top_n_eval")]
    pub top_n_eval: usize,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub mp: MpMode,
    #[serde(default)]
    pub scorer: ScorerKind,
    #[serde(default)]
    pub remote_endpoint: Option<String>,
    #[serde(default = "d_in_flight")]
    pub remote_max_in_flight: usize,
}

impl Default for Params {
    fn default() -> Self {
        toml::from_str("").expect("all params have defaults")
    }
}

/// Everything a pipeline run needs. Relative paths are resolved against the
/// directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub workdir: PathBuf,
    /// tweet files, JSON lines, optionally gzip-compressed
    #[serde(default)]
    pub inputs: Vec<PathBuf>,
    /// generate the inputs from this scenario instead
    #[serde(default)]
    pub scenario: Option<PathBuf>,
    /// `name,kind` CSV; the bundled list when absent
    #[serde(default)]
    pub targets: Option<PathBuf>,
    #[serde(default)]
    pub ground_truth: Option<PathBuf>,
    #[serde(default)]
    pub ideology_source: Option<IdeologySource>,
    #[serde(default)]
    pub labels: Option<PathBuf>,
    /// `domain,lean` CSV; the bundled list when absent
    #[serde(default)]
    pub outlet_lean: Option<PathBuf>,
    /// `word,valence` CSV; the bundled lexicon when absent
    #[serde(default)]
    pub valence: Option<PathBuf>,
    #[serde(default)]
    pub params: Params,
}

impl RunConfig {
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text)?;
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = String::from_utf8(read_file(path)?).map_err(|_| invalid("config is not UTF-8"))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.workdir);
        self.inputs.iter_mut().for_each(fix);
        for p in [
            &mut self.scenario,
            &mut self.targets,
            &mut self.ground_truth,
            &mut self.labels,
            &mut self.outlet_lean,
            &mut self.valence,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn ideology_source(&self) -> IdeologySource {
        self.ideology_source
            .unwrap_or(if self.labels.is_some() || self.scenario.is_some() {
                IdeologySource::File
            } else {
                IdeologySource::Outlets
            })
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        if self.scenario.is_some() {
            if !self.inputs.is_empty() || self.targets.is_some() || self.ground_truth.is_some() || self.labels.is_some()
            {
                return Err(invalid(
                    "with a scenario, inputs, targets, ground_truth and labels come from it and must not be set",
                ));
            }
            if self.ideology_source() != IdeologySource::File {
                return Err(invalid(
                    "a scenario provides file labels; ideology_source must be \"file\"",
                ));
            }
        } else {
            if self.inputs.is_empty() {
                return Err(invalid("no inputs and no scenario"));
            }
            if self.ground_truth.is_none() {
                return Err(invalid("ground_truth is required"));
            }
            if self.ideology_source() == IdeologySource::File && self.labels.is_none() {
                return Err(invalid("ideology_source = \"file\" needs labels"));
            }
        }
        if !(p.resolution > 0.0 && p.resolution.is_finite()) {
            return Err(invalid(format!("resolution must be positive, got {}", p.resolution)));
        }
        if p.top_k == 0 {
            return Err(invalid("top_k must be at least 1"));
        }
        if p.top_n_eval == 0 {
            return Err(invalid("top_n_eval must be at least 1"));
        }
        NGramConfig {
            order: p.order,
            k: p.smoothing,
            min_count: p.min_count,
        }
        .validate()
        .map_err(|e| invalid(e.to_string()))?;
        let dummy = RetweetNetwork::identity([1]);
        TrainingSchedule {
            total_steps: p.total_steps,
            mp_interval: p.mp_interval,
            mp_network: (p.mp != MpMode::Off).then_some(&dummy),
        }
        .validate()
        .map_err(|e| invalid(e.to_string()))?;
        ProbeConfig {
            n: p.n,
            keep: p.keep,
            max_tokens: p.max_tokens,
            seed: 0,
        }
        .validate()
        .map_err(|e| invalid(e.to_string()))?;
        if p.seeds.is_empty() {
            return Err(invalid("seeds must not be empty"));
        }
        if p.seeds.iter().collect::<BTreeSet<_>>().len() != p.seeds.len() {
            return Err(invalid("seeds must be distinct"));
        }
        if p.scorer == ScorerKind::Remote && p.remote_endpoint.is_none() {
            return Err(invalid("scorer = \"remote\" needs remote_endpoint"));
        }
        if p.remote_max_in_flight == 0 {
            return Err(invalid("remote_max_in_flight must be at least 1"));
        }
        Ok(())
    }

    fn ngram(&self) -> NGramConfig {
        NGramConfig {
            order: self.params.order,
            k: self.params.smoothing,
            min_count: self.params.min_count,
        }
    }
}

/// Written last by every stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    /// hash of this stage's parameters and inputs
    pub hash: String,
    /// hash of the whole configuration and its input files
    pub config_hash: String,
    pub version: String,
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every file written, by path relative to the stage dir
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    /// outputs were already in place for this hash
    Skipped,
}

#[derive(Debug, Clone)]
struct StagePlan {
    hash: String,
    inputs: BTreeMap<String, String>,
}

/// A validated config with the hash of every stage worked out up front.
pub struct Pipeline {
    config: RunConfig,
    config_hash: String,
    plans: BTreeMap<Stage, StagePlan>,
}

const BUNDLED: &str = "bundled";

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_file(path)?))
}

fn optional_hash(path: &Option<PathBuf>) -> Result<String> {
    path.as_deref()
        .map(file_hash)
        .unwrap_or_else(|| Ok(BUNDLED.to_string()))
}

fn canonical_hash(v: &Value) -> String {
    // serde_json maps are sorted by key, which makes this canonical
    sha256_hex(v.to_string().as_bytes())
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut raw = BTreeMap::new();
        if let Some(s) = &config.scenario {
            raw.insert("scenario".to_string(), file_hash(s)?);
        }
        for (i, p) in config.inputs.iter().enumerate() {
            raw.insert(format!("input.{i}"), file_hash(p)?);
        }
        if let Some(p) = &config.ground_truth {
            raw.insert("ground_truth".into(), file_hash(p)?);
        }
        if let Some(p) = &config.labels {
            raw.insert("labels".into(), file_hash(p)?);
        }
        raw.insert("targets".into(), optional_hash(&config.targets)?);
        raw.insert("outlet_lean".into(), optional_hash(&config.outlet_lean)?);
        raw.insert("valence".into(), optional_hash(&config.valence)?);
        let config_hash = canonical_hash(&json!({
            "version": VERSION,
            "params": serde_json::to_value(&config.params)?,
            "ideology_source": config.ideology_source(),
            "inputs": raw,
        }));

        let mut plans: BTreeMap<Stage, StagePlan> = BTreeMap::new();
        for stage in Stage::ALL {
            if stage == Stage::Synth && config.scenario.is_none() {
                continue;
            }
            let mut inputs = BTreeMap::new();
            for up in stage.upstream(&config) {
                inputs.insert(format!("stage.{up}"), plans[&up].hash.clone());
            }
            let synthetic = config.scenario.is_some();
            let mut add = |k: &str| {
                if let Some(v) = raw.get(k) {
                    inputs.insert(k.to_string(), v.clone());
                }
            };
            match stage {
                Stage::Synth => add("scenario"),
                Stage::Ingest => {
                    for k in raw
                        .keys()
                        .filter(|k| k.starts_with("input."))
                        .cloned()
                        .collect::<Vec<_>>()
                    {
                        add(&k);
                    }
                }
                Stage::Ideology => match config.ideology_source() {
                    IdeologySource::File if !synthetic => add("labels"),
                    IdeologySource::Outlets => add("outlet_lean"),
                    _ => {}
                },
                Stage::Probe => {
                    if !synthetic {
                        add("targets");
                    }
                    if config.params.scorer == ScorerKind::Lexicon {
                        add("valence");
                    }
                }
                Stage::Evaluate => {
                    if !synthetic {
                        add("targets");
                        add("ground_truth");
                    }
                }
                _ => {}
            }
            let hash = canonical_hash(&json!({
                "stage": stage.as_str(),
                "version": VERSION,
                "params": stage_params(&config, stage),
                "inputs": inputs,
            }));
            plans.insert(stage, StagePlan { hash, inputs });
        }
        Ok(Pipeline {
            config,
            config_hash,
            plans,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    /// Stages `all` runs, in order.
    pub fn stages(&self) -> Vec<Stage> {
        self.plans.keys().copied().collect()
    }

    pub fn stage_hash(&self, stage: Stage) -> Option<&str> {
        self.plans.get(&stage).map(|p| p.hash.as_str())
    }

    /// Where a stage keeps its outputs.
    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        stage_dir(&self.config.workdir, stage, self.config.params.mp)
    }

    fn manifest(&self, stage: Stage) -> Option<Manifest> {
        let bytes = fs::read(self.stage_dir(stage).join("manifest.json")).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    fn is_current(&self, stage: Stage) -> bool {
        let Some(m) = self.manifest(stage) else { return false };
        let Some(plan) = self.plans.get(&stage) else {
            return false;
        };
        if m.hash != plan.hash {
            return false;
        }
        let dir = self.stage_dir(stage);
        m.outputs
            .iter()
            .all(|(rel, h)| fs::read(dir.join(rel)).map(|b| sha256_hex(&b) == *h).unwrap_or(false))
    }

    fn require(&self, stage: Stage) -> Result<()> {
        for up in stage.upstream(&self.config) {
            match self.manifest(up) {
                None => return Err(PipelineError::MissingStage { stage, needed: up }),
                Some(m) if m.hash != self.plans[&up].hash => {
                    return Err(PipelineError::StaleStage { stage, needed: up })
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Run every stage in order, skipping those already current.
    pub fn run_all(&self) -> Result<Vec<(Stage, StageOutcome)>> {
        let mut out = Vec::new();
        for stage in self.stages() {
            out.push((stage, self.run_stage(stage)?));
        }
        Ok(out)
    }

    /// Run one stage. Its upstream stages must be current.
    pub fn run_stage(&self, stage: Stage) -> Result<StageOutcome> {
        let plan = self
            .plans
            .get(&stage)
            .ok_or_else(|| invalid(format!("stage `{stage}` needs a scenario")))?;
        self.require(stage)?;
        if self.is_current(stage) {
            log::info!("{stage}: up to date ({})", &plan.hash[..12]);
            return Ok(StageOutcome::Skipped);
        }
        let dir = self.stage_dir(stage);
        fs::create_dir_all(&dir)?;
        let _ = fs::remove_file(dir.join("manifest.json"));
        log::info!("{stage}: running ({})", &plan.hash[..12]);
        let ctx = StageCtx {
            dir: dir.clone(),
            hash: plan.hash.clone(),
            outputs: Vec::new(),
        };
        let ctx = match stage {
            Stage::Synth => self.synth(ctx)?,
            Stage::Ingest => self.ingest(ctx)?,
            Stage::Communities => self.communities(ctx)?,
            Stage::RetweetNet => self.retweet_net(ctx)?,
            Stage::Ideology => self.ideology(ctx)?,
            Stage::Train => self.train(ctx)?,
            Stage::Probe => self.probe(ctx)?,
            Stage::Evaluate => self.evaluate(ctx)?,
        };
        let mut outputs = BTreeMap::new();
        for rel in ctx.outputs {
            let h = sha256_hex(&read_file(&dir.join(&rel))?);
            outputs.insert(rel, h);
        }
        let manifest = Manifest {
            stage: stage.as_str().to_string(),
            hash: plan.hash.clone(),
            config_hash: self.config_hash.clone(),
            version: VERSION.to_string(),
            inputs: plan.inputs.clone(),
            outputs,
        };
        let tmp = dir.join("manifest.json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(&manifest)? + "\n")?;
        fs::rename(&tmp, dir.join("manifest.json"))?;
        Ok(StageOutcome::Ran)
    }

    fn dir_of(&self, stage: Stage) -> PathBuf {
        self.stage_dir(stage)
    }

    fn synth_dir(&self) -> PathBuf {
        self.dir_of(Stage::Synth)
    }

    fn input_paths(&self) -> Vec<PathBuf> {
        if self.config.scenario.is_some() {
            vec![self.synth_dir().join("tweets.jsonl")]
        } else {
            self.config.inputs.clone()
        }
    }

    fn targets(&self) -> Result<Vec<Target>> {
        let path = if self.config.scenario.is_some() {
            Some(self.synth_dir().join("targets.csv"))
        } else {
            self.config.targets.clone()
        };
        match path {
            Some(p) => Ok(read_targets(BufReader::new(fs::File::open(&p).map_err(|source| {
                PipelineError::File {
                    path: p.clone(),
                    source,
                }
            })?))?),
            None => Ok(bundled_targets()),
        }
    }

    fn ground_truth(&self) -> Result<GroundTruthTable> {
        let p = if self.config.scenario.is_some() {
            self.synth_dir().join("ground_truth.csv")
        } else {
            self.config.ground_truth.clone().expect("validated")
        };
        Ok(GroundTruthTable::read_csv(read_file(&p)?.as_slice())?)
    }

    fn load_store(&self) -> Result<TweetStore> {
        let path = self.dir_of(Stage::Ingest).join("tweets.jsonl");
        let (store, _) = read_inputs(&[path], DateTime::<Utc>::MAX_UTC)?;
        Ok(store)
    }

    fn load_partition(&self) -> Result<Partition> {
        let text = read_file(&self.dir_of(Stage::Communities).join("partition.json"))?;
        Ok(Partition::from_json(&String::from_utf8_lossy(&text))?)
    }

    fn top_communities(&self) -> Result<Vec<Community>> {
        Ok(top_k_communities(&self.load_partition()?, self.config.params.top_k)?)
    }

    fn load_mixes(&self) -> Result<BTreeMap<CommunityId, IdeologyMix>> {
        let text = read_file(&self.dir_of(Stage::Ideology).join("mixes.csv"))?;
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_slice());
        let mut out = BTreeMap::new();
        for row in rdr.records() {
            let row = row.map_err(|e| PipelineError::Failed {
                stage: Stage::Ideology,
                message: e.to_string(),
            })?;
            let bad = || PipelineError::Failed {
                stage: Stage::Ideology,
                message: format!("bad row in mixes.csv: {row:?}"),
            };
            let id: CommunityId = row.get(0).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let r: f64 = row.get(1).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            out.insert(id, IdeologyMix::new(r)?);
        }
        Ok(out)
    }

    fn labeled_store(&self) -> Result<TweetStore> {
        let mut store = self.load_store()?;
        let labels = FileLabeler::from_path(&self.dir_of(Stage::Ideology).join("user_labels.csv"))?;
        label_users(&mut store, &labels);
        Ok(store)
    }

    fn scorer(&self) -> Result<Box<dyn SentimentScorer>> {
        let p = &self.config.params;
        Ok(match p.scorer {
            ScorerKind::Lexicon => Box::new(match &self.config.valence {
                Some(path) => LexiconScorer::from_path(path)?,
                None => LexiconScorer::bundled(),
            }),
            ScorerKind::Remote => {
                let mut rc = RemoteConfig::new(p.remote_endpoint.clone().expect("validated"));
                rc.max_in_flight = p.remote_max_in_flight;
                Box::new(RemoteScorer::new(rc))
            }
        })
    }

    fn synth(&self, mut ctx: StageCtx) -> Result<StageCtx> {
        let path = self.config.scenario.as_ref().expect("planned only with a scenario");
        let text = String::from_utf8(read_file(path)?).map_err(|_| invalid("scenario is not UTF-8"))?;
        let spec = ScenarioSpec::from_toml(&text)?;
        let scenario = generate_scenario(&spec)?;
        scenario.write_to(&ctx.dir, Some(&ctx.hash))?;
        for f in ["tweets.jsonl", "labels.csv", "ground_truth.csv", "targets.csv"] {
            ctx.outputs.push(f.to_string());
        }
        Ok(ctx)
    }

    fn ingest(&self, mut ctx: StageCtx) -> Result<StageCtx> {
        let cutoff = self.config.params.cutoff.unwrap_or(DateTime::<Utc>::MAX_UTC);
        let (store, report) = read_inputs(&self.input_paths(), cutoff)?;
        log::info!(
            "ingest: kept {}, malformed {}, after cutoff {}, out of scope {}, empty {}, duplicates {}",
            report.kept,
            report.skipped_malformed,
            report.after_cutoff,
            report.out_of_scope,
            report.dropped_empty,
            report.duplicates
        );
        for d in &report.diagnostics {
            log::debug!("ingest: {d}");
        }
        if store.is_empty() {
            return Err(PipelineError::Failed {
                stage: Stage::Ingest,
                message: "no tweets survived parsing and filtering".into(),
            });
        }
        let mut w = create_file(&ctx.file("tweets.jsonl"))?;
        writeln!(w, "{}", json!({ "_manifest": ctx.hash }))?;
        store.write_jsonl(&mut w)?;
        w.flush()?;
        let summary = json!({
            "_manifest": ctx.hash,
            "kept": report.kept,
            "skipped_malformed": report.skipped_malformed,
            "after_cutoff": report.after_cutoff,
            "out_of_scope": report.out_of_scope,
            "dropped_empty": report.dropped_empty,
            "duplicates": report.duplicates,
            "users": store.users.len(),
        });
        fs::write(ctx.file("report.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
        ctx.outputs.extend(["tweets.jsonl".into(), "report.json".into()]);
        Ok(ctx)
    }

    fn communities(&self, mut ctx: StageCtx) -> Result<StageCtx> {
        let p = &self.config.params;
        let store = self.load_store()?;
        let sharers = filter_active_sharers(&store, p.min_followers);
        log::info!("communities: {} active sharers", sharers.len());
        let net = build_cosharing_network(&store, &sharers);
        let mut partition = louvain_partition(&net, p.resolution, p.louvain_seed)?;
        partition.count_tweets(&store);
        log::info!(
            "communities: {} communities, modularity {:.4}",
            partition.len(),
            crate::community::modularity(&net, &partition, p.resolution)
        );
        fs::write(ctx.file("cosharing.json"), net.to_json(Some(&ctx.hash)))?;
        fs::write(ctx.file("partition.json"), partition.to_json(Some(&ctx.hash)))?;
        let mut w = create_file(&ctx.file("communities.csv"))?;
        partition.write_summary_csv(&net, &mut w, Some(&ctx.hash))?;
        w.flush()?;
        ctx.outputs.extend([
            "cosharing.json".into(),
            "partition.json".into(),
            "communities.csv".into(),
        ]);
        Ok(ctx)
    }

    fn retweet_net(&self, mut ctx: StageCtx) -> Result<StageCtx> {
        let store = self.load_store()?;
        let partition = self.load_partition()?;
        let top = top_k_communities(&partition, self.config.params.top_k)?;
        let assignment = partition.user_assignment(&top);
        let (net, report) = build_community_retweet_network(&store, &assignment);
        log::info!(
            "retweet-net: {} retweets counted, {} with an endpoint outside the top communities, {} quotes ignored",
            report.counted,
            report.skipped_unassigned,
            report.quotes_ignored
        );
        net.validate()?;
        fs::write(ctx.file("network.json"), net.to_json(Some(&ctx.hash)))?;
        fs::write(
            ctx.file("network.dot"),
            format!("// manifest: {}\n{}", ctx.hash, net.to_dot(0.0)),
        )?;
        ctx.outputs.extend(["network.json".into(), "network.dot".into()]);
        Ok(ctx)
    }

    fn ideology(&self, mut ctx: StageCtx) -> Result<StageCtx> {
        let mut store = self.load_store()?;
        let counts = match self.config.ideology_source() {
            IdeologySource::Input => None,
            IdeologySource::File => {
                let path = if self.config.scenario.is_some() {
                    self.synth_dir().join("labels.csv")
                } else {
                    self.config.labels.clone().expect("validated")
                };
                Some(label_users(&mut store, &FileLabeler::from_path(&path)?))
            }
            IdeologySource::Outlets => {
                let labeler = match &self.config.outlet_lean {
                    Some(p) => LexiconLabeler::from_path(p)?,
                    None => LexiconLabeler::bundled(),
                };
                Some(label_users(&mut store, &labeler))
            }
        };
        if let Some(c) = counts {
            log::info!("ideology: user labels {c:?}");
        }
        let mut labels = String::new();
        labels.push_str(&format!("# manifest: {}\nuser_id,label\n", ctx.hash));
        for (u, rec) in &store.users {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
            w.write_record([u.0.as_str(), rec.ideology.as_str()])
                .map_err(|e| PipelineError::Failed {
                    stage: Stage::Ideology,
                    message: e.to_string(),
                })?;
            labels.push_str(&String::from_utf8_lossy(&w.into_inner().map_err(|e| e.into_error())?));
        }
        fs::write(ctx.file("user_labels.csv"), labels)?;

        let mut mixes = format!("# manifest: {}\ncommunity,r_lib,r_con\n", ctx.hash);
        for c in self.top_communities()? {
            let mix = ideology_fractions(&c, &store)?;
            mixes.push_str(&format!("{},{:?},{:?}\n", c.id, mix.r_lib(), mix.r_con()));
        }
        fs::write(ctx.file("mixes.csv"), mixes)?;
        ctx.outputs.extend(["user_labels.csv".into(), "mixes.csv".into()]);
        Ok(ctx)
    }

    fn train(&self, mut ctx: StageCtx) -> Result<StageCtx> {
        let p = &self.config.params;
        let store = self.labeled_store()?;
        let top = self.top_communities()?;
        let corpora = build_corpora(&store, &top)?;
        let network = match p.mp {
            MpMode::Off => None,
            _ => {
                let text = read_file(&self.dir_of(Stage::RetweetNet).join("network.json"))?;
                Some(RetweetNetwork::from_json(&String::from_utf8_lossy(&text))?)
            }
        };
        let cfg = self.config.ngram();
        let factory = |_: CommunityId| -> Result<Box<dyn CommunityLm>, LmError> { Ok(Box::new(NGramModel::new(cfg)?)) };
        for &s in &p.seeds {
            let net = match (p.mp, &network) {
                (MpMode::Random, Some(n)) => {
                    Some(randomize_retweet_weights(n, seed::derive(s, &[seed::tag("random-mp")])))
                }
                (_, n) => n.clone(),
            };
            let schedule = TrainingSchedule {
                total_steps: p.total_steps,
                mp_interval: p.mp_interval,
                mp_network: net.as_ref(),
            };
            let (models, log) = train_all(&corpora, &schedule, &factory, s)?;
            for w in &log.warnings {
                log::warn!("train seed {s}: {w}");
            }
            let sub = format!("seed-{s}");
            fs::create_dir_all(ctx.dir.join(&sub))?;
            for (id, m) in &models {
                let mut doc: Value = serde_json::from_slice(&m.to_bytes()?)?;
                if let Value::Object(map) = &mut doc {
                    map.insert("_manifest".into(), Value::String(ctx.hash.clone()));
                }
                let rel = format!("{sub}/model-{id}.json");
                fs::write(ctx.dir.join(&rel), serde_json::to_vec(&doc)?)?;
                ctx.outputs.push(rel);
            }
            let corpora_summary: BTreeMap<String, Value> = log
                .final_corpora
                .iter()
                .map(|(id, c)| {
                    let [lib, con, unk] = c.stratum_counts();
                    let imported = c.tweets.iter().filter(|t| t.source != *id).count();
                    (
                        id.to_string(),
                        json!({ "lib": lib, "con": con, "unknown": unk, "imported": imported }),
                    )
                })
                .collect();
            let summary = json!({
                "_manifest": ctx.hash,
                "seed": s,
                "mp": p.mp.as_str(),
                "mp_rounds": log.mp_rounds,
                "warnings": log.warnings.iter().map(|w| w.to_string()).collect::<Vec<_>>(),
                "network": net.as_ref().map(|n| {
                    n.edges.iter().map(|((i, j), w)| json!([i, j, w])).collect::<Vec<_>>()
                }),
                "final_corpora": corpora_summary,
            });
            let rel = format!("{sub}/log.json");
            fs::write(ctx.dir.join(&rel), serde_json::to_string_pretty(&summary)? + "\n")?;
            ctx.outputs.push(rel);
        }
        Ok(ctx)
    }

    fn load_models(&self, s: u64) -> Result<BTreeMap<CommunityId, Box<dyn CommunityLm>>> {
        let dir = self.dir_of(Stage::Train).join(format!("seed-{s}"));
        let m = self.manifest(Stage::Train).ok_or(PipelineError::MissingStage {
            stage: Stage::Probe,
            needed: Stage::Train,
        })?;
        let prefix = format!("seed-{s}/model-");
        let mut out: BTreeMap<CommunityId, Box<dyn CommunityLm>> = BTreeMap::new();
        for rel in m.outputs.keys().filter(|k| k.starts_with(&prefix)) {
            let id: CommunityId = rel[prefix.len()..]
                .trim_end_matches(".json")
                .parse()
                .map_err(|_| invalid(format!("unexpected model file {rel}")))?;
            let bytes = read_file(&self.dir_of(Stage::Train).join(rel))?;
            out.insert(id, Box::new(NGramModel::from_bytes(&bytes)?));
        }
        if out.is_empty() {
            return Err(PipelineError::Failed {
                stage: Stage::Probe,
                message: format!("no models under {}", dir.display()),
            });
        }
        Ok(out)
    }

    fn probe(&self, mut ctx: StageCtx) -> Result<StageCtx> {
        let p = &self.config.params;
        let targets = self.targets()?;
        let scorer = self.scorer()?;
        for &s in &p.seeds {
            let models = self.load_models(s)?;
            let cfg = ProbeConfig {
                n: p.n,
                keep: p.keep,
                max_tokens: p.max_tokens,
                seed: s,
            };
            let sub = format!("seed-{s}");
            fs::create_dir_all(ctx.dir.join(&sub))?;
            let checkpoint = ctx.dir.join(format!("{sub}/checkpoint-{}.csv", &ctx.hash[..16]));
            let mut matrices = Vec::new();
            for prompt in 1..=4 {
                let m = build_stance_matrix(&models, &targets, prompt, &cfg, scorer.as_ref(), Some(&checkpoint))?;
                if !m.failures.is_empty() {
                    let list: Vec<String> = m
                        .failures
                        .iter()
                        .map(|((c, t), e)| format!("community {c} / {t}: {e}"))
                        .collect();
                    return Err(PipelineError::Failed {
                        stage: Stage::Probe,
                        message: format!(
                            "{} cells failed (finished cells are kept for the next run): {}",
                            list.len(),
                            list.join("; ")
                        ),
                    });
                }
                matrices.push(m);
            }
            let rel = format!("{sub}/stance.csv");
            let mut w = create_file(&ctx.dir.join(&rel))?;
            StanceMatrix::write_csv(&matrices, &mut w, Some(&ctx.hash))?;
            w.flush()?;
            let _ = fs::remove_file(&checkpoint);
            ctx.outputs.push(rel);
        }
        Ok(ctx)
    }

    fn evaluate(&self, mut ctx: StageCtx) -> Result<StageCtx> {
        let p = &self.config.params;
        let gt = self.ground_truth()?;
        let mixes = self.load_mixes()?;
        let names: Vec<String> = self.targets()?.into_iter().map(|t| t.name).collect();
        let truth = truth_matrix(&gt, &mixes, &names)?;
        let mut runs: Vec<(String, Vec<RankingReport>)> = Vec::new();
        for &s in &p.seeds {
            let rel = format!("seed-{s}/stance.csv");
            let text = read_file(&self.dir_of(Stage::Probe).join(rel))?;
            let matrices = StanceMatrix::read_csv(text.as_slice())?;
            let mut reports = Vec::new();
            for m in matrices.values() {
                reports.push(target_specific_report(m, &truth)?);
                reports.push(community_specific_report(m, &truth, p.top_n_eval)?);
            }
            runs.push((format!("seed-{s}"), reports));
        }
        let mut summary = String::new();
        for task in [RankingTask::TargetSpecific, RankingTask::CommunitySpecific] {
            let mut aggs: Vec<AggregateReport> = Vec::new();
            for prompt in 1..=4 {
                let reports: Vec<RankingReport> = runs
                    .iter()
                    .flat_map(|(_, r)| r.iter())
                    .filter(|r| r.task == task && r.prompt_index == prompt)
                    .cloned()
                    .collect();
                aggs.push(aggregate(&reports)?);
            }
            let name = format!("{}.csv", task.as_str());
            let mut w = create_file(&ctx.file(&name))?;
            write_aggregate_csv(&aggs, &mut w, Some(&ctx.hash))?;
            w.flush()?;
            ctx.outputs.push(name);
            summary.push_str(&compare_runs(&[(p.mp.as_str().to_string(), aggs)])?.render_text());
            summary.push('\n');
        }
        let mut w = create_file(&ctx.file("units.csv"))?;
        write_units_csv(&runs, &mut w, Some(&ctx.hash))?;
        w.flush()?;
        fs::write(ctx.file("summary.txt"), format!("# manifest: {}\n{summary}", ctx.hash))?;
        ctx.outputs.extend(["units.csv".into(), "summary.txt".into()]);
        Ok(ctx)
    }
}

struct StageCtx {
    dir: PathBuf,
    hash: String,
    outputs: Vec<String>,
}

impl StageCtx {
    fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

pub fn stage_dir(workdir: &Path, stage: Stage, mp: MpMode) -> PathBuf {
    let d = workdir.join(stage.as_str());
    if stage.per_mode() {
        d.join(mp.as_str())
    } else {
        d
    }
}

/// Parameters that affect a stage's outputs.
fn stage_params(cfg: &RunConfig, stage: Stage) -> Value {
    let p = &cfg.params;
    match stage {
        Stage::Synth => json!({}),
        Stage::Ingest => json!({ "cutoff": p.cutoff }),
        Stage::Communities => json!({
            "min_followers": p.min_followers,
            "resolution": p.resolution,
            "louvain_seed": p.louvain_seed,
        }),
        Stage::RetweetNet => json!({ "top_k": p.top_k }),
        Stage::Ideology => json!({ "top_k": p.top_k, "source": cfg.ideology_source() }),
        Stage::Train => json!({
            "top_k": p.top_k,
            "ngram": cfg.ngram(),
            "total_steps": p.total_steps,
            "mp_interval": p.mp_interval,
            "mp": p.mp,
            "seeds": p.seeds,
        }),
        Stage::Probe => json!({
            "n": p.n,
            "keep": p.keep,
            "max_tokens": p.max_tokens,
            "seeds": p.seeds,
            "scorer": p.scorer,
            "remote_endpoint": if p.scorer == ScorerKind::Remote { p.remote_endpoint.clone() } else { None },
        }),
        Stage::Evaluate => json!({ "top_n_eval": p.top_n_eval, "seeds": p.seeds }),
    }
}

/// Aggregated reports of every message passing mode evaluated under
/// `workdir`, for one task, in on/off/random order.
pub fn collect_reports(workdir: &Path, task: RankingTask) -> Result<Vec<(String, Vec<AggregateReport>)>> {
    let mut out = Vec::new();
    for mode in [MpMode::On, MpMode::Off, MpMode::Random] {
        let path = stage_dir(workdir, Stage::Evaluate, mode).join(format!("{}.csv", task.as_str()));
        if path.exists() {
            out.push((
                mode.as_str().to_string(),
                read_aggregate_csv(read_file(&path)?.as_slice())?,
            ));
        }
    }
    if out.is_empty() {
        return Err(PipelineError::MissingStage {
            stage: Stage::Evaluate,
            needed: Stage::Evaluate,
        });
    }
    Ok(out)
}
