//! Prompting community models about targets and scoring the answers.
//!
//! For each (community, target) cell a model writes `n` continuations of a
//! prompt built from the target's name. The `keep` longest continuations are
//! scored for sentiment and the mean score is the community's stance.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::lm::{continuation, tokenize, CommunityLm, LmError};
use crate::seed;
use crate::CommunityId;

#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error("prompt index must be 1..=4, got {0}")]
    BadPrompt(usize),
    #[error("keep ({keep}) must be between 1 and n ({n})")]
    BadKeep { n: usize, keep: usize },
    #[error("model produced no non-empty responses for {0:?}")]
    NoResponses(String),
    #[error("duplicate target {0:?}")]
    DuplicateTarget(String),
    #[error("bad target kind {0:?}; expected person or group")]
    BadKind(String),
    #[error("bad valence {1:?} for {0:?}")]
    BadValence(String, String),
    #[error("scorer request failed after {attempts} attempts: {message}")]
    Remote { attempts: u32, message: String },
    #[error("malformed scorer response: {0}")]
    Malformed(String),
    #[error("bad checkpoint line {line}: {message}")]
    Checkpoint { line: usize, message: String },
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Person,
    Group,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Target {
    pub name: String,
    pub kind: TargetKind,
}

impl Target {
    pub fn new(name: impl Into<String>, kind: TargetKind) -> Self {
        Target {
            name: name.into(),
            kind,
        }
    }

    pub fn copula(&self) -> &'static str {
        match self.kind {
            TargetKind::Person => "is",
            TargetKind::Group => "are",
        }
    }
}

/// Targets from a `name,kind` CSV. Names must be unique.
pub fn read_targets<R: Read>(reader: R) -> Result<Vec<Target>, ProbeError> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let name = row.get(0).unwrap_or("").trim().to_string();
        let kind = match row.get(1).unwrap_or("").trim() {
            "person" => TargetKind::Person,
            "group" => TargetKind::Group,
            other => return Err(ProbeError::BadKind(other.to_string())),
        };
        if !seen.insert(name.clone()) {
            return Err(ProbeError::DuplicateTarget(name));
        }
        out.push(Target { name, kind });
    }
    Ok(out)
}

/// The bundled list of thirty people and groups.
pub fn bundled_targets() -> Vec<Target> {
    read_targets(include_str!("../../../data/targets.csv").as_bytes()).expect("bundled targets parse")
}

/// `["X", "X is", "X is a", "X is the"]`, with "are" for groups.
pub fn render_prompts(target: &Target) -> [String; 4] {
    let x = &target.name;
    let c = target.copula();
    [
        x.clone(),
        format!("{x} {c}"),
        format!("{x} {c} a"),
        format!("{x} {c} the"),
    ]
}

/// Maps text to -1, 0 or +1.
pub trait SentimentScorer: Send + Sync {
    fn score(&self, text: &str) -> Result<i8, ProbeError>;
}

/// Sums +1/-1 valence words. A negator flips the sign of the next valence
/// word; sentence-ending punctuation cancels a pending flip.
#[derive(Debug, Clone)]
pub struct LexiconScorer {
    valence: HashMap<String, i8>,
}

fn is_negator(tok: &str) -> bool {
    matches!(
        tok,
        "not" | "no" | "never" | "nothing" | "nobody" | "neither" | "nor" | "cannot"
    ) || tok.ends_with("n't")
}

impl LexiconScorer {
    pub fn new(valence: HashMap<String, i8>) -> Self {
        LexiconScorer { valence }
    }

    /// `token,valence` rows with valence -1 or 1.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self, ProbeError> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
        let mut valence = HashMap::new();
        for row in rdr.records() {
            let row = row?;
            let tok = row.get(0).unwrap_or("").trim().to_lowercase();
            let raw = row.get(1).unwrap_or("").trim();
            let v = match raw {
                "1" | "+1" => 1,
                "-1" => -1,
                _ => return Err(ProbeError::BadValence(tok, raw.to_string())),
            };
            valence.insert(tok, v);
        }
        Ok(LexiconScorer { valence })
    }

    pub fn from_path(path: &Path) -> Result<Self, ProbeError> {
        LexiconScorer::from_csv(File::open(path)?)
    }

    pub fn bundled() -> Self {
        LexiconScorer::from_csv(include_str!("../../../data/valence.csv").as_bytes()).expect("bundled lexicon parses")
    }

    pub fn valence(&self) -> &HashMap<String, i8> {
        &self.valence
    }

    /// Positive and negative words, each sorted.
    pub fn words(&self) -> (Vec<&str>, Vec<&str>) {
        let mut pos: Vec<&str> = self
            .valence
            .iter()
            .filter(|(_, &v)| v > 0)
            .map(|(k, _)| k.as_str())
            .collect();
        let mut neg: Vec<&str> = self
            .valence
            .iter()
            .filter(|(_, &v)| v < 0)
            .map(|(k, _)| k.as_str())
            .collect();
        pos.sort_unstable();
        neg.sort_unstable();
        (pos, neg)
    }

    pub fn raw_sum(&self, text: &str) -> i64 {
        let mut sum = 0i64;
        let mut flip = false;
        for tok in tokenize(text) {
            if let Some(&v) = self.valence.get(&tok) {
                sum += if flip { -i64::from(v) } else { i64::from(v) };
                flip = false;
            } else if is_negator(&tok) {
                flip = !flip;
            } else if matches!(tok.as_str(), "." | "!" | "?") {
                flip = false;
            }
        }
        sum
    }
}

impl SentimentScorer for LexiconScorer {
    fn score(&self, text: &str) -> Result<i8, ProbeError> {
        Ok(self.raw_sum(text).signum() as i8)
    }
}

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub timeout: Duration,
    pub max_in_flight: usize,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        RemoteConfig {
            endpoint: endpoint.into(),
            max_attempts: 5,
            initial_backoff: Duration::from_millis(200),
            timeout: Duration::from_secs(30),
            max_in_flight: 8,
        }
    }
}

/// Classifier behind HTTP: `POST {"text": ...}` answered by
/// `{"label": "negative" | "neutral" | "positive"}`.
///
/// Results are cached by SHA-256 of the text, so a text is sent at most
/// once per scorer. Failed requests are retried with doubling delays.
pub struct RemoteScorer {
    config: RemoteConfig,
    agent: ureq::Agent,
    cache: Mutex<HashMap<[u8; 32], i8>>,
    in_flight: Mutex<usize>,
    slot_free: Condvar,
    calls: AtomicUsize,
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct ScoreResponse {
    label: String,
}

impl RemoteScorer {
    pub fn new(config: RemoteConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(true)
            .build()
            .into();
        RemoteScorer {
            config,
            agent,
            cache: Mutex::new(HashMap::new()),
            in_flight: Mutex::new(0),
            slot_free: Condvar::new(),
            calls: AtomicUsize::new(0),
        }
    }

    /// HTTP requests sent so far, retries included.
    pub fn remote_calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    fn acquire(&self) {
        let mut n = self.in_flight.lock().expect("scorer lock");
        while *n >= self.config.max_in_flight.max(1) {
            n = self.slot_free.wait(n).expect("scorer lock");
        }
        *n += 1;
    }

    fn release(&self) {
        *self.in_flight.lock().expect("scorer lock") -= 1;
        self.slot_free.notify_one();
    }

    fn request(&self, text: &str) -> Result<i8, ProbeError> {
        let mut delay = self.config.initial_backoff;
        let mut last = String::new();
        for attempt in 1..=self.config.max_attempts.max(1) {
            self.calls.fetch_add(1, Ordering::Relaxed);
            self.acquire();
            let sent = self.agent.post(&self.config.endpoint).send_json(ScoreRequest { text });
            let result = sent.and_then(|mut r| r.body_mut().read_to_string());
            self.release();
            match result {
                Ok(body) => {
                    let resp: ScoreResponse =
                        serde_json::from_str(&body).map_err(|e| ProbeError::Malformed(format!("{e}: {body}")))?;
                    return match resp.label.to_ascii_lowercase().as_str() {
                        "negative" => Ok(-1),
                        "neutral" => Ok(0),
                        "positive" => Ok(1),
                        other => Err(ProbeError::Malformed(format!("unknown label {other:?}"))),
                    };
                }
                Err(e) => {
                    last = e.to_string();
                    log::debug!("scorer attempt {attempt} failed: {last}");
                    if attempt < self.config.max_attempts {
                        std::thread::sleep(delay);
                        delay *= 2;
                    }
                }
            }
        }
        Err(ProbeError::Remote {
            attempts: self.config.max_attempts.max(1),
            message: last,
        })
    }
}

impl SentimentScorer for RemoteScorer {
    fn score(&self, text: &str) -> Result<i8, ProbeError> {
        let key: [u8; 32] = Sha256::digest(text.as_bytes()).into();
        if let Some(&v) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(v);
        }
        let v = self.request(text)?;
        self.cache.lock().expect("cache lock").insert(key, v);
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub n: usize,
    pub keep: usize,
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            n: 1000,
            keep: 850,
            max_tokens: 32,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), ProbeError> {
        if self.keep == 0 || self.keep > self.n {
            return Err(ProbeError::BadKeep {
                n: self.n,
                keep: self.keep,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellScore {
    pub score: f64,
    pub n_scored: usize,
}

/// Indices of the `keep` longest texts by continuation length in
/// characters; ties go to the earlier text.
pub fn longest(prompt: &str, texts: &[String], keep: usize) -> Vec<usize> {
    let mut idx: Vec<(usize, usize)> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| (continuation(prompt, t).chars().count(), i))
        .collect();
    idx.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    idx.into_iter().take(keep).map(|(_, i)| i).collect()
}

/// Stance of one model toward one target under prompt `prompt_index` (1-4):
/// the mean sentiment of the `keep` longest of `n` responses. Each response
/// is scored together with its prompt.
pub fn probe_stance(
    model: &dyn CommunityLm,
    target: &Target,
    prompt_index: usize,
    config: &ProbeConfig,
    scorer: &dyn SentimentScorer,
    rng: &mut seed::Rng,
) -> Result<CellScore, ProbeError> {
    config.validate()?;
    let prompt = render_prompts(target)
        .get(prompt_index.wrapping_sub(1))
        .cloned()
        .ok_or(ProbeError::BadPrompt(prompt_index))?;
    let texts = model.generate(&prompt, config.n, config.max_tokens, rng)?;
    if texts.iter().all(|t| continuation(&prompt, t).is_empty()) {
        return Err(ProbeError::NoResponses(prompt));
    }
    let kept = longest(&prompt, &texts, config.keep);
    let scores = kept
        .par_iter()
        .map(|&i| scorer.score(&texts[i]).map(i64::from))
        .collect::<Result<Vec<i64>, ProbeError>>()?;
    Ok(CellScore {
        score: scores.iter().sum::<i64>() as f64 / scores.len() as f64,
        n_scored: scores.len(),
    })
}

/// Predicted stances for one prompt: rows are communities, columns targets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StanceMatrix {
    pub prompt_index: usize,
    pub cells: BTreeMap<(CommunityId, String), CellScore>,
    pub failures: BTreeMap<(CommunityId, String), String>,
}

impl StanceMatrix {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn get(&self, community: CommunityId, target: &str) -> Option<f64> {
        self.cells.get(&(community, target.to_string())).map(|c| c.score)
    }

    pub fn communities(&self) -> Vec<CommunityId> {
        let mut v: Vec<CommunityId> = self.cells.keys().map(|(c, _)| *c).collect();
        v.dedup();
        v
    }

    /// Rows `community,target,prompt,score,n_scored`, sorted by community
    /// then target, optionally after a `# manifest:` line.
    pub fn write_csv<W: Write>(matrices: &[StanceMatrix], mut w: W, manifest: Option<&str>) -> Result<(), ProbeError> {
        if let Some(m) = manifest {
            writeln!(w, "# manifest: {m}")?;
        }
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["community", "target", "prompt", "score", "n_scored"])?;
        for m in matrices {
            for ((c, t), cell) in &m.cells {
                out.write_record([
                    c.to_string(),
                    t.clone(),
                    m.prompt_index.to_string(),
                    format_score(cell.score),
                    cell.n_scored.to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Inverse of [`StanceMatrix::write_csv`], one matrix per prompt index.
    pub fn read_csv<R: Read>(reader: R) -> Result<BTreeMap<usize, StanceMatrix>, ProbeError> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
        let mut out: BTreeMap<usize, StanceMatrix> = BTreeMap::new();
        for (i, row) in rdr.records().enumerate() {
            let row = row?;
            let (p, key, cell) = parse_row(&row).map_err(|message| ProbeError::Checkpoint { line: i + 2, message })?;
            let m = out.entry(p).or_insert_with(|| StanceMatrix {
                prompt_index: p,
                ..Default::default()
            });
            m.cells.insert(key, cell);
        }
        Ok(out)
    }
}

fn format_score(x: f64) -> String {
    // shortest round-trip representation keeps the file byte-stable
    format!("{x:?}")
}

fn parse_row(row: &csv::StringRecord) -> Result<(usize, (CommunityId, String), CellScore), String> {
    let field = |i: usize| row.get(i).ok_or_else(|| format!("missing column {i}"));
    let c: CommunityId = field(0)?.parse().map_err(|e| format!("community: {e}"))?;
    let t = field(1)?.to_string();
    let p: usize = field(2)?.parse().map_err(|e| format!("prompt: {e}"))?;
    let score: f64 = field(3)?.parse().map_err(|e| format!("score: {e}"))?;
    let n_scored: usize = field(4)?.parse().map_err(|e| format!("n_scored: {e}"))?;
    Ok((p, (c, t), CellScore { score, n_scored }))
}

/// Generator seed for one cell, independent of evaluation order.
pub fn cell_seed(base: u64, community: CommunityId, target: &str, prompt_index: usize) -> u64 {
    seed::derive(
        base,
        &[
            seed::tag("probe"),
            u64::from(community),
            seed::tag(target),
            prompt_index as u64,
        ],
    )
}

/// Probe every (community, target) cell for one prompt, in parallel.
///
/// With a checkpoint path, finished cells are appended to that file as they
/// complete and cells already present in it are not recomputed. Cells that
/// fail are listed in `failures` rather than aborting the matrix.
pub fn build_stance_matrix(
    models: &BTreeMap<CommunityId, Box<dyn CommunityLm>>,
    targets: &[Target],
    prompt_index: usize,
    config: &ProbeConfig,
    scorer: &dyn SentimentScorer,
    checkpoint: Option<&Path>,
) -> Result<StanceMatrix, ProbeError> {
    config.validate()?;
    if !(1..=4).contains(&prompt_index) {
        return Err(ProbeError::BadPrompt(prompt_index));
    }
    let mut done: BTreeMap<(CommunityId, String), CellScore> = BTreeMap::new();
    if let Some(path) = checkpoint.filter(|p| p.exists()) {
        let text = fs::read_to_string(path)?;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row = csv::ReaderBuilder::new()
                .has_headers(false)
                .from_reader(line.as_bytes())
                .records()
                .next()
                .transpose()?;
            let Some(row) = row else { continue };
            // a torn final line from an interrupted run is ignored
            match parse_row(&row) {
                Ok((p, key, cell)) if p == prompt_index => {
                    done.insert(key, cell);
                }
                Ok(_) => {}
                Err(message) if i + 1 == text.lines().count() => log::warn!("ignoring torn checkpoint line: {message}"),
                Err(message) => return Err(ProbeError::Checkpoint { line: i + 1, message }),
            }
        }
    }
    let sink = match checkpoint {
        Some(p) => Some(Mutex::new(OpenOptions::new().create(true).append(true).open(p)?)),
        None => None,
    };
    let todo: Vec<(CommunityId, &Target)> = models
        .keys()
        .flat_map(|&c| targets.iter().map(move |t| (c, t)))
        .filter(|(c, t)| !done.contains_key(&(*c, t.name.clone())))
        .collect();
    let results: Vec<((CommunityId, String), Result<CellScore, String>)> = todo
        .par_iter()
        .map(|&(c, t)| {
            let mut rng = seed::rng(cell_seed(config.seed, c, &t.name, prompt_index), &[]);
            let r =
                probe_stance(models[&c].as_ref(), t, prompt_index, config, scorer, &mut rng).map_err(|e| e.to_string());
            if let (Ok(cell), Some(sink)) = (&r, &sink) {
                let mut line = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
                line.write_record([
                    c.to_string(),
                    t.name.clone(),
                    prompt_index.to_string(),
                    format_score(cell.score),
                    cell.n_scored.to_string(),
                ])
                .and_then(|_| line.flush().map_err(csv::Error::from))
                .ok();
                if let Ok(bytes) = line.into_inner() {
                    let mut f = sink.lock().expect("checkpoint lock");
                    if let Err(e) = f.write_all(&bytes).and_then(|_| f.flush()) {
                        log::warn!("checkpoint write failed: {e}");
                    }
                }
            }
            ((c, t.name.clone()), r)
        })
        .collect();
    let mut m = StanceMatrix {
        prompt_index,
        cells: done,
        failures: BTreeMap::new(),
    };
    for (key, r) in results {
        match r {
            Ok(cell) => {
                m.cells.insert(key, cell);
            }
            Err(e) => {
                log::warn!("cell ({}, {}) failed: {e}", key.0, key.1);
                m.failures.insert(key, e);
            }
        }
    }
    Ok(m)
}
