//! Parsing, filtering and cleaning of tweet-like JSON-lines records.
//!
//! One record per line:
//!
//! ```json
//! {"tweet_id": "1", "user_id": "u1", "text": "...", "created_at": "2020-03-01T12:00:00Z",
//!  "is_retweet": false, "is_quote": false, "retweeted_user_id": null,
//!  "urls": ["https://www.foxnews.com/politics/a"], "user_followers": 250,
//!  "in_scope": true, "user_label": "conservative"}
//! ```
//!
//! `user_followers`, `in_scope` and `user_label` are optional. Ids may be JSON
//! strings or integers. Lines carrying a `_manifest` key are artifact headers
//! and are skipped without counting as malformed.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use chrono::{DateTime, NaiveDateTime, SecondsFormat, Utc};
use flate2::read::MultiGzDecoder;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::ideology::Ideology;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub String);

impl std::fmt::Display for UserId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for UserId {
    fn from(s: &str) -> Self {
        UserId(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TweetId(pub String);

#[derive(Debug, Clone, PartialEq)]
pub struct TweetRecord {
    pub tweet_id: TweetId,
    pub user_id: UserId,
    /// Cleaned text. May be empty for a tweet that only carried links; such
    /// tweets still count toward co-sharing but never enter a corpus.
    pub text: String,
    pub timestamp: DateTime<Utc>,
    pub is_retweet: bool,
    pub is_quote: bool,
    pub retweeted_user_id: Option<UserId>,
    /// Outlet domains, deduplicated, in first-seen order.
    pub domains: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserRecord {
    pub user_id: UserId,
    pub follower_count: u64,
    pub ideology: Ideology,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TweetStore {
    pub records: Vec<TweetRecord>,
    pub users: BTreeMap<UserId, UserRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseReport {
    pub kept: usize,
    pub skipped_malformed: usize,
    pub after_cutoff: usize,
    pub out_of_scope: usize,
    pub dropped_empty: usize,
    pub duplicates: usize,
    /// First few per-line diagnostics, `line N: reason`.
    pub diagnostics: Vec<String>,
}

const MAX_DIAGNOSTICS: usize = 50;

impl ParseReport {
    fn merge(&mut self, other: ParseReport) {
        self.kept += other.kept;
        self.skipped_malformed += other.skipped_malformed;
        self.after_cutoff += other.after_cutoff;
        self.out_of_scope += other.out_of_scope;
        self.dropped_empty += other.dropped_empty;
        self.duplicates += other.duplicates;
        for d in other.diagnostics {
            if self.diagnostics.len() < MAX_DIAGNOSTICS {
                self.diagnostics.push(d);
            }
        }
    }

    fn malformed(&mut self, line: usize, reason: impl std::fmt::Display) {
        self.skipped_malformed += 1;
        if self.diagnostics.len() < MAX_DIAGNOSTICS {
            self.diagnostics.push(format!("line {line}: {reason}"));
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("read error: {0}")]
    Stream(#[from] io::Error),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum IdRepr {
    Str(String),
    Num(u64),
}

impl IdRepr {
    fn into_string(self) -> String {
        match self {
            IdRepr::Str(s) => s,
            IdRepr::Num(n) => n.to_string(),
        }
    }
}

#[derive(Deserialize)]
struct RawRecord {
    tweet_id: IdRepr,
    user_id: IdRepr,
    text: String,
    created_at: String,
    #[serde(default)]
    is_retweet: bool,
    #[serde(default)]
    is_quote: bool,
    #[serde(default)]
    retweeted_user_id: Option<IdRepr>,
    #[serde(default)]
    urls: Vec<String>,
    #[serde(default)]
    user_followers: Option<u64>,
    #[serde(default)]
    in_scope: Option<bool>,
    #[serde(default)]
    user_label: Option<Ideology>,
}

#[derive(Serialize)]
struct OutRecord<'a> {
    tweet_id: &'a str,
    user_id: &'a str,
    text: &'a str,
    created_at: String,
    is_retweet: bool,
    is_quote: bool,
    retweeted_user_id: Option<&'a str>,
    urls: &'a [String],
    user_followers: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    user_label: Option<Ideology>,
}

fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t.and_utc());
        }
    }
    // Twitter API v1 style: "Wed Oct 10 20:19:24 +0000 2018"
    DateTime::parse_from_str(s, "%a %b %d %H:%M:%S %z %Y")
        .ok()
        .map(|t| t.with_timezone(&Utc))
}

/// Outlet name for a URL: lowercased host with a leading `www.` and a trailing
/// `.com` removed, so `https://www.foxnews.com/x` becomes `foxnews` while
/// `npr.org` and `wapo.st` stay as they are. Shortener hosts are not expanded.
pub fn extract_domain(raw: &str) -> Option<String> {
    let raw = raw.trim();
    if raw.is_empty() {
        return None;
    }
    let parsed = url::Url::parse(raw)
        .ok()
        .filter(|u| u.host_str().is_some())
        .or_else(|| url::Url::parse(&format!("http://{raw}")).ok())?;
    let host = parsed.host_str()?.trim_end_matches('.').to_ascii_lowercase();
    let host = host.strip_prefix("www.").unwrap_or(&host);
    let host = host.strip_suffix(".com").unwrap_or(host);
    if host.is_empty() {
        None
    } else {
        Some(host.to_string())
    }
}

fn url_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)(?:https?://|\bwww\.)\S+").unwrap())
}

/// Remove URLs and a trailing truncation ellipsis, then collapse whitespace.
///
/// When the text ends in `…` or `...`, the last whitespace-delimited token is
/// dropped: it holds the ellipsis and the word it cut off. A bare ellipsis
/// token is dropped on its own since the word before it was complete. This
/// repeats until no trailing ellipsis is left, which keeps the function
/// idempotent.
pub fn clean_text(raw: &str) -> String {
    let stripped = url_regex().replace_all(raw, " ");
    let mut tokens: Vec<&str> = stripped.split_whitespace().collect();
    while let Some(last) = tokens.last() {
        if last.ends_with('…') || last.ends_with("...") {
            tokens.pop();
        } else {
            break;
        }
    }
    tokens.join(" ")
}

/// Parse one JSON-lines stream. Records at or after `cutoff` are dropped, as
/// are records flagged `in_scope: false`. Malformed lines are counted and
/// skipped.
pub fn parse_tweet_records<R: BufRead>(
    reader: R,
    cutoff: DateTime<Utc>,
) -> Result<(TweetStore, ParseReport), IngestError> {
    let mut builder = StoreBuilder::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        builder.push_line(idx + 1, &line, cutoff);
    }
    Ok(builder.finish())
}

/// Parse several files (plain or gzip, detected by magic bytes) in parallel.
/// The merged store keeps file order, then line order within each file; a
/// tweet id seen in an earlier file wins over later duplicates.
pub fn read_inputs(paths: &[PathBuf], cutoff: DateTime<Utc>) -> Result<(TweetStore, ParseReport), IngestError> {
    let shards: Vec<Result<(TweetStore, ParseReport), IngestError>> = paths
        .par_iter()
        .map(|p| {
            let reader = open_maybe_gz(p)?;
            parse_tweet_records(reader, cutoff)
        })
        .collect();
    let mut store = TweetStore::default();
    let mut report = ParseReport::default();
    let mut seen: HashSet<TweetId> = HashSet::new();
    for shard in shards {
        let (s, r) = shard?;
        report.merge(r);
        for rec in s.records {
            if seen.insert(rec.tweet_id.clone()) {
                store.records.push(rec);
            } else {
                report.duplicates += 1;
                report.kept -= 1;
            }
        }
        for (id, u) in s.users {
            merge_user(&mut store.users, id, u);
        }
    }
    let authors: BTreeSet<&UserId> = store.records.iter().map(|r| &r.user_id).collect();
    store.users.retain(|id, _| authors.contains(id));
    Ok((store, report))
}

pub fn open_maybe_gz(path: &Path) -> Result<Box<dyn BufRead + Send>, IngestError> {
    let io_err = |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = File::open(path).map_err(io_err)?;
    let mut magic = [0u8; 2];
    let n = file.read(&mut magic).map_err(io_err)?;
    let file = File::open(path).map_err(io_err)?;
    if n == 2 && magic == [0x1f, 0x8b] {
        Ok(Box::new(BufReader::new(MultiGzDecoder::new(file))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

fn merge_user(users: &mut BTreeMap<UserId, UserRecord>, id: UserId, u: UserRecord) {
    users
        .entry(id)
        .and_modify(|e| {
            e.follower_count = e.follower_count.max(u.follower_count);
            if e.ideology == Ideology::Unknown {
                e.ideology = u.ideology;
            }
        })
        .or_insert(u);
}

#[derive(Default)]
struct StoreBuilder {
    store: TweetStore,
    report: ParseReport,
    seen: HashSet<TweetId>,
}

impl StoreBuilder {
    fn push_line(&mut self, lineno: usize, line: &str, cutoff: DateTime<Utc>) {
        let line = line.trim();
        if line.is_empty() {
            return;
        }
        let value: serde_json::Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(e) => return self.report.malformed(lineno, e),
        };
        if value.get("_manifest").is_some() {
            return;
        }
        let raw: RawRecord = match serde_json::from_value(value) {
            Ok(r) => r,
            Err(e) => return self.report.malformed(lineno, e),
        };
        let Some(timestamp) = parse_timestamp(&raw.created_at) else {
            return self
                .report
                .malformed(lineno, format!("bad created_at {:?}", raw.created_at));
        };
        let retweeted = raw.retweeted_user_id.map(|i| UserId(i.into_string()));
        if raw.is_retweet && retweeted.is_none() {
            return self.report.malformed(lineno, "retweet without retweeted_user_id");
        }
        if timestamp >= cutoff {
            self.report.after_cutoff += 1;
            return;
        }
        if raw.in_scope == Some(false) {
            self.report.out_of_scope += 1;
            return;
        }
        let mut domains: Vec<String> = Vec::new();
        for u in &raw.urls {
            if let Some(d) = extract_domain(u) {
                if !domains.contains(&d) {
                    domains.push(d);
                }
            }
        }
        let text = clean_text(&raw.text);
        if text.is_empty() && domains.is_empty() {
            self.report.dropped_empty += 1;
            return;
        }
        let tweet_id = TweetId(raw.tweet_id.into_string());
        if !self.seen.insert(tweet_id.clone()) {
            self.report.duplicates += 1;
            return;
        }
        let user_id = UserId(raw.user_id.into_string());
        merge_user(
            &mut self.store.users,
            user_id.clone(),
            UserRecord {
                user_id: user_id.clone(),
                follower_count: raw.user_followers.unwrap_or(0),
                ideology: raw.user_label.unwrap_or(Ideology::Unknown),
            },
        );
        self.store.records.push(TweetRecord {
            tweet_id,
            user_id,
            text,
            timestamp,
            is_retweet: raw.is_retweet,
            is_quote: raw.is_quote,
            retweeted_user_id: retweeted,
            domains,
        });
        self.report.kept += 1;
    }

    fn finish(self) -> (TweetStore, ParseReport) {
        (self.store, self.report)
    }
}

impl TweetStore {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record indices grouped by author, in store order.
    pub fn tweets_by_user(&self) -> BTreeMap<&UserId, Vec<usize>> {
        let mut out: BTreeMap<&UserId, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            out.entry(&r.user_id).or_default().push(i);
        }
        out
    }

    pub fn ideology_of(&self, user: &UserId) -> Ideology {
        self.users.get(user).map(|u| u.ideology).unwrap_or(Ideology::Unknown)
    }

    /// Serialize in the input schema. Re-parsing the output with any cutoff
    /// later than every timestamp yields an equal store.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        for r in &self.records {
            let user = self.users.get(&r.user_id);
            let out = OutRecord {
                tweet_id: &r.tweet_id.0,
                user_id: &r.user_id.0,
                text: &r.text,
                created_at: r.timestamp.to_rfc3339_opts(SecondsFormat::AutoSi, true),
                is_retweet: r.is_retweet,
                is_quote: r.is_quote,
                retweeted_user_id: r.retweeted_user_id.as_ref().map(|u| u.0.as_str()),
                urls: &r.domains,
                user_followers: user.map(|u| u.follower_count).unwrap_or(0),
                user_label: user.map(|u| u.ideology).filter(|i| *i != Ideology::Unknown),
            };
            serde_json::to_writer(&mut w, &out)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Users with strictly more than `min_followers` followers who authored at
/// least one tweet linking a news outlet.
pub fn filter_active_sharers(store: &TweetStore, min_followers: u64) -> BTreeSet<UserId> {
    let sharers: HashSet<&UserId> = store
        .records
        .iter()
        .filter(|r| !r.domains.is_empty())
        .map(|r| &r.user_id)
        .collect();
    store
        .users
        .values()
        .filter(|u| u.follower_count > min_followers && sharers.contains(&u.user_id))
        .map(|u| u.user_id.clone())
        .collect()
}
