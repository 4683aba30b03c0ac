//! Per-community language models.
//!
//! [`CommunityLm`] is the contract the rest of the pipeline uses: fit on a
//! corpus for some number of epochs, then sample continuations of a prompt.
//! The built-in backend is [`NGramModel`], an add-k smoothed n-gram model
//! with suffix backoff. [`ProcessLm`] forwards generation to another process
//! speaking newline-delimited JSON, and [`serve`] is the matching server loop.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{run_message_passing_round, Corpus, CorpusError, MpWarning};
use crate::graph::RetweetNetwork;
use crate::seed;
use crate::CommunityId;

pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
const BOS: &str = "<s>";
const FORMAT: &str = "commstance-ngram/1";

const EOS_ID: u32 = 0;
const UNK_ID: u32 = 1;
const BOS_ID: u32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum LmError {
    #[error("corpus for community {0} is empty")]
    EmptyCorpus(CommunityId),
    #[error("invalid schedule: {0}")]
    BadSchedule(String),
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("model is untrained")]
    Untrained,
    #[error("model format: {0}")]
    Format(String),
    #[error("backend does not support {0}")]
    Unsupported(&'static str),
    #[error("external backend: {0}")]
    Backend(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Lowercase, then split into alphanumeric runs and single punctuation
/// characters. An apostrophe between two alphanumerics stays inside the
/// word, so "don't" is one token.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut out = Vec::new();
    let mut cur = String::new();
    for (i, &c) in chars.iter().enumerate() {
        let inner_quote = c == '\'' && !cur.is_empty() && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
        if c.is_alphanumeric() || inner_quote {
            cur.push(c);
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// The part of a generated text after its prompt.
pub fn continuation<'a>(prompt: &str, text: &'a str) -> &'a str {
    text.strip_prefix(prompt).map(str::trim_start).unwrap_or(text)
}

/// A trainable, sampleable per-community model.
pub trait CommunityLm: Send + Sync {
    /// Train for `steps` epochs over `corpus`. Repeated calls keep learning.
    fn fit(&mut self, corpus: &Corpus, steps: u32) -> Result<(), LmError>;

    /// `n` texts, each the prompt followed by a sampled continuation of at
    /// most `max_tokens` tokens.
    fn generate(&self, prompt: &str, n: usize, max_tokens: usize, rng: &mut seed::Rng) -> Result<Vec<String>, LmError>;

    fn to_bytes(&self) -> Result<Vec<u8>, LmError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NGramConfig {
    pub order: usize,
    pub k: f64,
    pub min_count: u64,
}

impl Default for NGramConfig {
    fn default() -> Self {
        NGramConfig {
            order: 3,
            k: 0.01,
            min_count: 2,
        }
    }
}

impl NGramConfig {
    pub fn validate(&self) -> Result<(), LmError> {
        if self.order == 0 {
            return Err(LmError::BadConfig("order must be at least 1".into()));
        }
        if !(self.k >= 0.0 && self.k.is_finite()) {
            return Err(LmError::BadConfig(format!("k must be finite and >= 0, got {}", self.k)));
        }
        Ok(())
    }
}

/// Compiled view used for scoring and sampling, rebuilt after every fit.
#[derive(Debug, Clone, Default)]
struct Compiled {
    /// raw id -> vocab id
    map: Vec<u32>,
    vocab_size: usize,
    /// vocab id -> surface form
    words: Vec<String>,
    /// context (vocab ids, oldest first) -> sorted (next, count), total
    table: HashMap<Vec<u32>, (Vec<(u32, u64)>, u64)>,
}

/// Add-k smoothed n-gram model with backoff to the longest seen context.
///
/// Raw counts are kept over interned surface tokens, so tokens that only
/// become frequent after later fits still enter the vocabulary. The
/// vocabulary is every token seen at least `min_count` times across fitted
/// corpora, plus `</s>` and `<unk>`.
#[derive(Debug, Clone)]
pub struct NGramModel {
    config: NGramConfig,
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    /// occurrences per raw token, counted once per fit call
    seen: Vec<u64>,
    /// raw n-grams of length 1..=order (context then next), epoch-weighted
    counts: HashMap<Vec<u32>, u64>,
    compiled: Compiled,
}

impl NGramModel {
    pub fn new(config: NGramConfig) -> Result<Self, LmError> {
        config.validate()?;
        let mut m = NGramModel {
            config,
            tokens: Vec::new(),
            index: HashMap::new(),
            seen: Vec::new(),
            counts: HashMap::new(),
            compiled: Compiled::default(),
        };
        for t in [EOS, UNK, BOS] {
            m.intern(t);
        }
        m.compile();
        Ok(m)
    }

    pub fn config(&self) -> NGramConfig {
        self.config
    }

    fn intern(&mut self, tok: &str) -> u32 {
        if let Some(&id) = self.index.get(tok) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(tok.to_string());
        self.index.insert(tok.to_string(), id);
        self.seen.push(0);
        id
    }

    /// Add one pass over `texts`, weighted by `steps`.
    pub fn fit_texts<'a>(&mut self, texts: impl IntoIterator<Item = &'a str>, steps: u32) {
        let ctx = self.config.order - 1;
        for text in texts {
            let toks = tokenize(text);
            if toks.is_empty() {
                continue;
            }
            let mut seq = vec![BOS_ID; ctx];
            for t in &toks {
                let id = self.intern(t);
                self.seen[id as usize] += 1;
                seq.push(id);
            }
            seq.push(EOS_ID);
            for end in ctx..seq.len() {
                for len in 1..=self.config.order {
                    let gram = seq[end + 1 - len..=end].to_vec();
                    *self.counts.entry(gram).or_insert(0) += u64::from(steps);
                }
            }
        }
        self.compile();
    }

    fn compile(&mut self) {
        let mut vocab: Vec<(&str, u32)> = self
            .tokens
            .iter()
            .enumerate()
            .skip(3)
            .filter(|(i, _)| self.seen[*i] >= self.config.min_count.max(1))
            .map(|(i, t)| (t.as_str(), i as u32))
            .collect();
        vocab.sort();
        let mut map = vec![UNK_ID; self.tokens.len()];
        map[EOS_ID as usize] = EOS_ID;
        let mut words = vec![EOS.to_string(), UNK.to_string()];
        for (v, (t, raw)) in vocab.iter().enumerate() {
            map[*raw as usize] = v as u32 + 2;
            words.push(t.to_string());
        }
        // BOS maps outside the vocabulary: it conditions but is never emitted
        map[BOS_ID as usize] = u32::MAX;
        let mut grouped: HashMap<Vec<u32>, BTreeMap<u32, u64>> = HashMap::new();
        for (gram, &c) in &self.counts {
            let mapped: Vec<u32> = gram.iter().map(|&r| map[r as usize]).collect();
            let (ctx, next) = mapped.split_at(mapped.len() - 1);
            *grouped.entry(ctx.to_vec()).or_default().entry(next[0]).or_insert(0) += c;
        }
        let table = grouped
            .into_iter()
            .map(|(ctx, nexts)| {
                let total = nexts.values().sum();
                (ctx, (nexts.into_iter().collect(), total))
            })
            .collect();
        self.compiled = Compiled {
            map,
            vocab_size: words.len(),
            words,
            table,
        };
    }

    /// Vocabulary in id order: `</s>`, `<unk>`, then sorted tokens.
    pub fn vocabulary(&self) -> &[String] {
        &self.compiled.words
    }

    fn vocab_id(&self, tok: &str) -> u32 {
        self.index
            .get(tok)
            .map(|&r| self.compiled.map[r as usize])
            .filter(|&v| v != u32::MAX)
            .unwrap_or(UNK_ID)
    }

    fn context_ids(&self, history: &[&str]) -> Vec<u32> {
        let ctx = self.config.order - 1;
        let mut ids = vec![u32::MAX; ctx];
        ids.extend(history.iter().map(|t| self.vocab_id(t)));
        ids.split_off(ids.len() - ctx)
    }

    /// Longest suffix of `ctx` with observations, with its counts.
    fn backoff<'a>(&'a self, ctx: &[u32]) -> Option<(&'a [(u32, u64)], u64)> {
        (0..=ctx.len()).find_map(|skip| {
            self.compiled
                .table
                .get(&ctx[skip..])
                .filter(|(_, total)| *total > 0)
                .map(|(v, t)| (v.as_slice(), *t))
        })
    }

    /// Next-token distribution after `history` (tokens, oldest first), as
    /// probabilities indexed by vocabulary id.
    pub fn distribution(&self, history: &[&str]) -> Result<Vec<f64>, LmError> {
        let ctx = self.context_ids(history);
        let (obs, total) = self.backoff(&ctx).ok_or(LmError::Untrained)?;
        let v = self.compiled.vocab_size as f64;
        let denom = total as f64 + self.config.k * v;
        let mut p = vec![self.config.k / denom; self.compiled.vocab_size];
        for &(w, c) in obs {
            p[w as usize] = (c as f64 + self.config.k) / denom;
        }
        Ok(p)
    }

    /// Probability of `next` after `history`.
    pub fn prob(&self, history: &[&str], next: &str) -> Result<f64, LmError> {
        let id = if next == EOS { EOS_ID } else { self.vocab_id(next) };
        Ok(self.distribution(history)?[id as usize])
    }

    fn sample_next(&self, ctx: &[u32], rng: &mut seed::Rng) -> Result<u32, LmError> {
        let (obs, total) = self.backoff(ctx).ok_or(LmError::Untrained)?;
        let k = self.config.k;
        let v = self.compiled.vocab_size;
        let denom = total as f64 + k * v as f64;
        let u: f64 = rng.gen::<f64>();
        let mut acc = 0.0;
        for &(w, c) in obs {
            acc += (c as f64 + k) / denom;
            if u < acc {
                return Ok(w);
            }
        }
        let unobserved = v - obs.len();
        if unobserved == 0 || k == 0.0 {
            return Ok(obs.last().map(|&(w, _)| w).unwrap_or(EOS_ID));
        }
        let pick = (((u - acc) / (k / denom)) as usize).min(unobserved - 1);
        // walk vocab ids, skipping the observed ones (sorted ascending)
        let mut skipped = 0;
        let mut target = pick as u32;
        for &(w, _) in obs {
            if w <= target + skipped {
                skipped += 1;
            } else {
                break;
            }
        }
        target += skipped;
        Ok(target)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LmError> {
        let doc: NGramDoc = serde_json::from_slice(bytes)?;
        if doc.format != FORMAT {
            return Err(LmError::Format(format!("expected {FORMAT}, got {}", doc.format)));
        }
        let reserved = doc.tokens.len() >= 3 && doc.tokens[0] == EOS && doc.tokens[1] == UNK && doc.tokens[2] == BOS;
        if doc.tokens.len() != doc.seen.len() || !reserved {
            return Err(LmError::Format("bad token table".into()));
        }
        doc.config.validate()?;
        let index = doc
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let mut counts = HashMap::with_capacity(doc.ngrams.len());
        for mut g in doc.ngrams {
            let c = g.pop().ok_or_else(|| LmError::Format("empty n-gram row".into()))?;
            if g.is_empty() || g.len() > doc.config.order || g.iter().any(|&t| t as usize >= doc.tokens.len()) {
                return Err(LmError::Format("bad n-gram row".into()));
            }
            counts.insert(g.into_iter().map(|t| t as u32).collect(), c);
        }
        let mut m = NGramModel {
            config: doc.config,
            tokens: doc.tokens,
            index,
            seen: doc.seen,
            counts,
            compiled: Compiled::default(),
        };
        m.compile();
        Ok(m)
    }
}

#[derive(Serialize, Deserialize)]
struct NGramDoc {
    format: String,
    config: NGramConfig,
    tokens: Vec<String>,
    seen: Vec<u64>,
    /// each row is the n-gram's raw token ids followed by its count
    ngrams: Vec<Vec<u64>>,
}

impl CommunityLm for NGramModel {
    fn fit(&mut self, corpus: &Corpus, steps: u32) -> Result<(), LmError> {
        if corpus.is_empty() {
            return Err(LmError::EmptyCorpus(corpus.community_id));
        }
        self.fit_texts(corpus.tweets.iter().map(|t| &*t.text), steps);
        Ok(())
    }

    fn generate(&self, prompt: &str, n: usize, max_tokens: usize, rng: &mut seed::Rng) -> Result<Vec<String>, LmError> {
        let prompt_toks = tokenize(prompt);
        let refs: Vec<&str> = prompt_toks.iter().map(String::as_str).collect();
        let start = self.context_ids(&refs);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let mut ctx = start.clone();
            let mut words: Vec<&str> = Vec::new();
            while words.len() < max_tokens {
                let w = self.sample_next(&ctx, rng)?;
                if w == EOS_ID {
                    break;
                }
                words.push(&self.compiled.words[w as usize]);
                if !ctx.is_empty() {
                    ctx.remove(0);
                    ctx.push(w);
                }
            }
            out.push(if words.is_empty() {
                prompt.to_string()
            } else {
                format!("{prompt} {}", words.join(" "))
            });
        }
        Ok(out)
    }

    /// Deterministic JSON: tokens in intern order, n-grams sorted.
    fn to_bytes(&self) -> Result<Vec<u8>, LmError> {
        let mut ngrams: Vec<Vec<u64>> = self
            .counts
            .iter()
            .map(|(g, &c)| g.iter().map(|&t| u64::from(t)).chain([c]).collect())
            .collect();
        ngrams.sort();
        let doc = NGramDoc {
            format: FORMAT.into(),
            config: self.config,
            tokens: self.tokens.clone(),
            seen: self.seen.clone(),
            ngrams,
        };
        Ok(serde_json::to_vec(&doc)?)
    }
}

/// When message passing happens during training.
#[derive(Debug, Clone, Copy)]
pub struct TrainingSchedule<'a> {
    /// total epochs, `x`
    pub total_steps: u32,
    /// epochs between message passing rounds, `y`
    pub mp_interval: u32,
    /// `None` trains every model on its own corpus only
    pub mp_network: Option<&'a RetweetNetwork>,
}

impl TrainingSchedule<'_> {
    pub fn validate(&self) -> Result<(), LmError> {
        if self.total_steps == 0 {
            return Err(LmError::BadSchedule("total steps must be positive".into()));
        }
        if self.mp_network.is_some() && !(0 < self.mp_interval && self.mp_interval < self.total_steps) {
            return Err(LmError::BadSchedule(format!(
                "need 0 < interval < total steps, got interval {} with {} steps",
                self.mp_interval, self.total_steps
            )));
        }
        Ok(())
    }

    /// Epoch counts after which a message passing round runs.
    pub fn mp_points(&self) -> Vec<u32> {
        match self.mp_network {
            None => Vec::new(),
            Some(_) => (1..)
                .map(|r| r * self.mp_interval)
                .take_while(|&s| s < self.total_steps)
                .collect(),
        }
    }
}

/// What happened during [`train_all`].
#[derive(Debug, Default)]
pub struct TrainingLog {
    pub mp_rounds: Vec<u32>,
    pub warnings: Vec<MpWarning>,
    /// corpora after the final round
    pub final_corpora: BTreeMap<CommunityId, Corpus>,
}

pub type ModelFactory<'f> = dyn Fn(CommunityId) -> Result<Box<dyn CommunityLm>, LmError> + Sync + 'f;

/// Train one model per corpus for `schedule.total_steps` epochs, running a
/// synchronous message passing round at each of the schedule's points.
/// Models train in parallel between rounds.
pub fn train_all(
    corpora: &BTreeMap<CommunityId, Corpus>,
    schedule: &TrainingSchedule<'_>,
    factory: &ModelFactory<'_>,
    seed: u64,
) -> Result<(BTreeMap<CommunityId, Box<dyn CommunityLm>>, TrainingLog), LmError> {
    schedule.validate()?;
    if let Some((&id, _)) = corpora.iter().find(|(_, c)| c.is_empty()) {
        return Err(LmError::EmptyCorpus(id));
    }
    let mut models: BTreeMap<CommunityId, Box<dyn CommunityLm>> = BTreeMap::new();
    for &id in corpora.keys() {
        models.insert(id, factory(id)?);
    }
    let mut current = corpora.clone();
    let mut log = TrainingLog::default();
    let mut done = 0;
    let points = schedule.mp_points();
    for (r, &stop) in points.iter().chain(std::iter::once(&schedule.total_steps)).enumerate() {
        let steps = stop - done;
        models
            .par_iter_mut()
            .map(|(id, m)| m.fit(&current[id], steps))
            .collect::<Result<Vec<()>, LmError>>()?;
        done = stop;
        if let (Some(net), true) = (schedule.mp_network, stop < schedule.total_steps) {
            let round_seed = seed::derive(seed, &[seed::tag("mp-round"), r as u64]);
            let (next, warnings) = run_message_passing_round(&current, net, round_seed)?;
            current = next;
            log.warnings.extend(warnings);
            log.mp_rounds.push(stop);
        }
    }
    log.final_corpora = current;
    Ok((models, log))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    pub n: usize,
    pub seed: u64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
}

fn default_max_tokens() -> usize {
    32
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GenerateResponse {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub texts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Answer newline-delimited [`GenerateRequest`]s from `input` with one
/// [`GenerateResponse`] line each, until end of input.
pub fn serve<R: BufRead, W: Write>(model: &dyn CommunityLm, input: R, mut output: W) -> Result<(), LmError> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = match serde_json::from_str::<GenerateRequest>(&line) {
            Ok(req) => {
                let mut rng = seed::rng(req.seed, &[]);
                match model.generate(&req.prompt, req.n, req.max_tokens, &mut rng) {
                    Ok(texts) => GenerateResponse { texts, error: None },
                    Err(e) => GenerateResponse {
                        texts: Vec::new(),
                        error: Some(e.to_string()),
                    },
                }
            }
            Err(e) => GenerateResponse {
                texts: Vec::new(),
                error: Some(format!("bad request: {e}")),
            },
        };
        serde_json::to_writer(&mut output, &resp)?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}

/// A model living in a child process that speaks the [`serve`] protocol on
/// its standard input and output. Generation only.
pub struct ProcessLm {
    io: Mutex<(BufWriter<ChildStdin>, BufReader<ChildStdout>)>,
    child: Mutex<Child>,
}

impl ProcessLm {
    pub fn spawn(mut command: Command) -> Result<Self, LmError> {
        let mut child = command.stdin(Stdio::piped()).stdout(Stdio::piped()).spawn()?;
        let stdin = child.stdin.take().ok_or_else(|| LmError::Backend("no stdin".into()))?;
        let stdout = child
            .stdout
            .take()
            .ok_or_else(|| LmError::Backend("no stdout".into()))?;
        Ok(ProcessLm {
            io: Mutex::new((BufWriter::new(stdin), BufReader::new(stdout))),
            child: Mutex::new(child),
        })
    }
}

impl Drop for ProcessLm {
    fn drop(&mut self) {
        if let Ok(mut c) = self.child.lock() {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

impl CommunityLm for ProcessLm {
    fn fit(&mut self, _corpus: &Corpus, _steps: u32) -> Result<(), LmError> {
        Err(LmError::Unsupported("training through a process adapter"))
    }

    fn generate(&self, prompt: &str, n: usize, max_tokens: usize, rng: &mut seed::Rng) -> Result<Vec<String>, LmError> {
        let req = GenerateRequest {
            prompt: prompt.to_string(),
            n,
            seed: rng.gen(),
            max_tokens,
        };
        let mut io = self
            .io
            .lock()
            .map_err(|_| LmError::Backend("adapter lock poisoned".into()))?;
        serde_json::to_writer(&mut io.0, &req)?;
        io.0.write_all(b"\n")?;
        io.0.flush()?;
        let mut line = String::new();
        if io.1.read_line(&mut line)? == 0 {
            return Err(LmError::Backend("adapter closed its output".into()));
        }
        let resp: GenerateResponse = serde_json::from_str(&line)?;
        if let Some(e) = resp.error {
            return Err(LmError::Backend(e));
        }
        if resp.texts.len() != n {
            return Err(LmError::Backend(format!(
                "asked for {n} texts, got {}",
                resp.texts.len()
            )));
        }
        Ok(resp.texts)
    }

    fn to_bytes(&self) -> Result<Vec<u8>, LmError> {
        Err(LmError::Unsupported("serializing a process adapter"))
    }
}
