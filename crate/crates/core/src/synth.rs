//! Synthetic scenarios with planted communities, ideologies and stances.
//!
//! A [`ScenarioSpec`] fixes, per community, its size and liberal tweet
//! share, and per target the average sentiment of liberal and conservative
//! authors. Tweets are filled from simple `<target> is <word> .` templates
//! whose only valence-bearing token comes from the sentiment lexicon, so the
//! lexicon scorer reads them exactly. Each community links its own set of
//! news outlets, which plants the co-sharing structure, and retweets follow
//! a given community-to-community weight matrix.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::community::NodeId;
use crate::eval::{EvalError, GroundTruthTable, TruthMatrix};
use crate::graph::{CoSharingNetwork, RetweetNetwork};
use crate::ideology::Ideology;
use crate::ingest::{parse_tweet_records, TweetStore, UserId};
use crate::probe::{LexiconScorer, Target, TargetKind};
use crate::seed;
use crate::CommunityId;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("scenario file: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn invalid(msg: impl Into<String>) -> SynthError {
    SynthError::Invalid(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommunitySpec {
    pub users: usize,
    /// original tweets by labeled users
    pub tweets: usize,
    pub r_lib: f64,
    /// users with no ideology label, each writing an average user's share
    #[serde(default)]
    pub unknown_users: usize,
    /// chance that a tweet is about a given target, unless overridden
    #[serde(default)]
    pub mention_rate: f64,
    #[serde(default)]
    pub mention_rates: BTreeMap<String, f64>,
}

impl CommunitySpec {
    pub fn mention(&self, target: &str) -> f64 {
        self.mention_rates.get(target).copied().unwrap_or(self.mention_rate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub name: String,
    pub kind: TargetKind,
    /// mean sentiment of liberal authors, in [-1, 1]
    pub p_lib: f64,
    pub p_con: f64,
}

fn default_outlets() -> usize {
    4
}
fn default_url_rate() -> f64 {
    0.5
}
fn default_cross_outlet() -> f64 {
    0.05
}
fn default_retweet_rate() -> f64 {
    0.5
}
fn default_followers() -> (u64, u64) {
    (150, 5000)
}
fn default_start() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).single().expect("valid date")
}

pub fn default_templates() -> Vec<String> {
    [
        "{target} {copula} {word} .",
        "{target} {copula} a {word} presence .",
        "{target} {copula} the {word} choice .",
    ]
    .map(String::from)
    .to_vec()
}

pub fn default_filler() -> Vec<String> {
    [
        "the weather is mild today .",
        "watching the game tonight .",
        "coffee first and then meetings .",
        "traffic on the bridge again .",
        "new episode drops on friday .",
        "the meeting moved to noon .",
        "reading about local history .",
        "the train was on time .",
        "planting tomatoes this weekend .",
        "the library opens at nine .",
        "long day at the office .",
        "the store ran out of bread .",
    ]
    .map(String::from)
    .to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub seed: u64,
    #[serde(default = "default_start")]
    pub start: DateTime<Utc>,
    #[serde(default = "default_outlets")]
    pub outlets_per_community: usize,
    /// chance that a tweet after a user's first carries a link
    #[serde(default = "default_url_rate")]
    pub url_rate: f64,
    /// chance that a link points at another community's outlet
    #[serde(default = "default_cross_outlet")]
    pub cross_outlet_rate: f64,
    /// retweets per original tweet
    #[serde(default = "default_retweet_rate")]
    pub retweet_rate: f64,
    #[serde(default = "default_followers")]
    pub followers: (u64, u64),
    #[serde(default = "default_templates")]
    pub templates: Vec<String>,
    #[serde(default = "default_filler")]
    pub filler: Vec<String>,
    /// row i: share of community i's retweets going to each community
    pub retweet_weights: Vec<Vec<f64>>,
    #[serde(rename = "community")]
    pub communities: Vec<CommunitySpec>,
    #[serde(rename = "target")]
    pub targets: Vec<TargetSpec>,
}

impl ScenarioSpec {
    pub fn from_toml(s: &str) -> Result<Self, SynthError> {
        let spec: ScenarioSpec = toml::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let k = self.communities.len();
        if k == 0 {
            return Err(invalid("no communities"));
        }
        if self.targets.is_empty() {
            return Err(invalid("no targets"));
        }
        if self.templates.is_empty() {
            return Err(invalid("template bank is empty"));
        }
        if let Some(t) = self
            .templates
            .iter()
            .find(|t| !t.contains("{target}") || !t.contains("{word}"))
        {
            return Err(invalid(format!("template {t:?} needs {{target}} and {{word}}")));
        }
        if self.outlets_per_community == 0 {
            return Err(invalid("outlets_per_community must be positive"));
        }
        for (name, p) in [
            ("url_rate", self.url_rate),
            ("cross_outlet_rate", self.cross_outlet_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(format!("{name} must be in [0, 1]")));
            }
        }
        if !(self.retweet_rate >= 0.0 && self.retweet_rate.is_finite()) {
            return Err(invalid("retweet_rate must be non-negative"));
        }
        if self.followers.0 > self.followers.1 {
            return Err(invalid("followers range is empty"));
        }
        if self.retweet_weights.len() != k || self.retweet_weights.iter().any(|r| r.len() != k) {
            return Err(invalid(format!("retweet_weights must be {k}x{k}")));
        }
        for (i, row) in self.retweet_weights.iter().enumerate() {
            if row.iter().any(|w| !(*w >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err(invalid(format!(
                    "retweet_weights row {} must be non-negative and sum to 1",
                    i + 1
                )));
            }
        }
        let names: BTreeSet<&str> = self.targets.iter().map(|t| t.name.as_str()).collect();
        if names.len() != self.targets.len() {
            return Err(invalid("duplicate target names"));
        }
        for t in &self.targets {
            if !(-1.0..=1.0).contains(&t.p_lib) || !(-1.0..=1.0).contains(&t.p_con) {
                return Err(invalid(format!("propensities for {:?} must be in [-1, 1]", t.name)));
            }
        }
        for (i, c) in self.communities.iter().enumerate() {
            let id = i + 1;
            if !(0.0..=1.0).contains(&c.r_lib) {
                return Err(invalid(format!("community {id}: r_lib must be in [0, 1]")));
            }
            if !(0.0..=1.0).contains(&c.mention_rate) || c.mention_rates.values().any(|m| !(0.0..=1.0).contains(m)) {
                return Err(invalid(format!("community {id}: mention rates must be in [0, 1]")));
            }
            if let Some(t) = c.mention_rates.keys().find(|t| !names.contains(t.as_str())) {
                return Err(invalid(format!("community {id}: unknown target {t:?}")));
            }
            split_users(c).ok_or_else(|| {
                invalid(format!(
                    "community {id}: cannot give {} users at least one tweet each with r_lib {}",
                    c.users, c.r_lib
                ))
            })?;
        }
        Ok(())
    }

    pub fn ground_truth(&self) -> Result<GroundTruthTable, SynthError> {
        let mut gt = GroundTruthTable::default();
        for t in &self.targets {
            gt.insert(&t.name, 50.0 * (1.0 + t.p_lib), 50.0 * (1.0 + t.p_con))?;
        }
        Ok(gt)
    }

    pub fn target_list(&self) -> Vec<Target> {
        self.targets.iter().map(|t| Target::new(&t.name, t.kind)).collect()
    }
}

/// `(liberal users, liberal tweets)` giving every labeled user at least one
/// tweet and a tweet-level liberal share of `round(r_lib * tweets) / tweets`.
fn split_users(c: &CommunitySpec) -> Option<(usize, usize)> {
    let n = c.users;
    if n == 0 || c.tweets < n {
        return None;
    }
    let lib_tweets = (c.r_lib * c.tweets as f64).round() as usize;
    let lib_users = if lib_tweets == 0 {
        0
    } else if lib_tweets == c.tweets {
        n
    } else {
        ((c.r_lib * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1))
    };
    let ok = lib_tweets >= lib_users
        && c.tweets - lib_tweets >= n - lib_users
        && (lib_users > 0 || lib_tweets == 0)
        && (lib_users < n || lib_tweets == c.tweets);
    ok.then_some((lib_users, lib_tweets))
}

/// Spread `total` over `slots` as evenly as possible, earlier slots first.
fn spread(total: usize, slots: usize) -> Vec<usize> {
    if slots == 0 {
        return Vec::new();
    }
    (0..slots)
        .map(|s| total / slots + usize::from(s < total % slots))
        .collect()
}

pub fn user_name(community: CommunityId, k: usize) -> String {
    format!("c{community}u{k:04}")
}

pub fn outlet_domain(community: CommunityId, k: usize) -> String {
    format!("c{community}news{k}.com")
}

/// A generated dataset and everything planted in it.
#[derive(Debug, Clone)]
pub struct Scenario {
    /// input records, one JSON object per line
    pub lines: Vec<String>,
    /// `lines` parsed by the regular ingest path
    pub store: TweetStore,
    pub labels: BTreeMap<UserId, Ideology>,
    pub planted: BTreeMap<UserId, CommunityId>,
    /// realized retweet counts, normalized
    pub retweet_network: RetweetNetwork,
    pub truth: GroundTruthTable,
    pub targets: Vec<Target>,
}

struct Words<'a> {
    pos: Vec<&'a str>,
    neg: Vec<&'a str>,
}

fn sample_text(
    spec: &ScenarioSpec,
    c: &CommunitySpec,
    side: Ideology,
    words: &Words<'_>,
    rng: &mut seed::Rng,
) -> String {
    let rates: Vec<f64> = spec.targets.iter().map(|t| c.mention(&t.name)).collect();
    let total: f64 = rates.iter().sum();
    let mut u = rng.gen::<f64>() * total.max(1.0);
    for (t, &m) in spec.targets.iter().zip(&rates) {
        if u < m {
            let p = match side {
                Ideology::Liberal => t.p_lib,
                Ideology::Conservative => t.p_con,
                Ideology::Unknown => 0.0,
            };
            let positive = rng.gen::<f64>() < (1.0 + p) / 2.0;
            let list = if positive { &words.pos } else { &words.neg };
            let word = list.choose(rng).expect("lexicon lists are non-empty");
            let template = spec.templates.choose(rng).expect("validated non-empty");
            let copula = Target::new(&t.name, t.kind).copula();
            return template
                .replace("{target}", &t.name)
                .replace("{copula}", copula)
                .replace("{word}", word);
        }
        u -= m;
    }
    spec.filler.choose(rng).cloned().unwrap_or_default()
}

struct CommunityOutput {
    lines: Vec<(DateTime<Utc>, String)>,
    labels: Vec<(UserId, Ideology)>,
    retweets: Vec<CommunityId>,
}

fn generate_community(spec: &ScenarioSpec, idx: usize, words: &Words<'_>) -> CommunityOutput {
    let id = idx as CommunityId + 1;
    let c = &spec.communities[idx];
    let k = spec.communities.len();
    let mut rng = seed::rng(spec.seed, &[seed::tag("community"), id as u64]);
    let (lib_users, lib_tweets) = split_users(c).expect("validated");
    let mut users: Vec<(UserId, Ideology, usize)> = Vec::new();
    for (u, n) in spread(lib_tweets, lib_users).into_iter().enumerate() {
        users.push((UserId(user_name(id, u)), Ideology::Liberal, n));
    }
    let con_users = c.users - lib_users;
    for (u, n) in spread(c.tweets - lib_tweets, con_users).into_iter().enumerate() {
        users.push((UserId(user_name(id, lib_users + u)), Ideology::Conservative, n));
    }
    let per_unknown = c.tweets.div_ceil(c.users);
    for u in 0..c.unknown_users {
        users.push((UserId(user_name(id, c.users + u)), Ideology::Unknown, per_unknown));
    }

    let mut lines = Vec::new();
    let mut seq = 0usize;
    let base = spec.start + Duration::seconds(idx as i64);
    let stamp = |seq: usize| base + Duration::seconds(seq as i64 * k as i64);
    let followers: Vec<u64> = users
        .iter()
        .map(|_| rng.gen_range(spec.followers.0..=spec.followers.1))
        .collect();
    for (ui, (user, side, n)) in users.iter().enumerate() {
        for t in 0..*n {
            let mut text = sample_text(spec, c, *side, words, &mut rng);
            let mut urls = Vec::new();
            if t == 0 || rng.gen::<f64>() < spec.url_rate {
                let (oc, o) = if k > 1 && rng.gen::<f64>() < spec.cross_outlet_rate {
                    let mut other = rng.gen_range(0..k - 1);
                    if other >= idx {
                        other += 1;
                    }
                    (other as CommunityId + 1, rng.gen_range(0..spec.outlets_per_community))
                } else {
                    (id, rng.gen_range(0..spec.outlets_per_community))
                };
                let url = format!("https://www.{}/story/{seq}", outlet_domain(oc, o));
                text = format!("{text} {url}");
                urls.push(url);
            }
            let ts = stamp(seq);
            lines.push((
                ts,
                json!({
                    "tweet_id": format!("c{id}t{seq}"),
                    "user_id": user.0,
                    "text": text,
                    "created_at": ts.to_rfc3339(),
                    "urls": urls,
                    "user_followers": followers[ui],
                })
                .to_string(),
            ));
            seq += 1;
        }
    }

    // retweets keep the community's liberal share: liberal retweeters get
    // round(r_lib * R) of them
    let labeled: Vec<usize> = (0..users.len()).filter(|&u| users[u].1 != Ideology::Unknown).collect();
    let n_rt = (spec.retweet_rate * c.tweets as f64).round() as usize;
    let lib_rt = (c.r_lib * n_rt as f64).round() as usize;
    let lib_idx: Vec<usize> = labeled
        .iter()
        .copied()
        .filter(|&u| users[u].1 == Ideology::Liberal)
        .collect();
    let con_idx: Vec<usize> = labeled
        .iter()
        .copied()
        .filter(|&u| users[u].1 == Ideology::Conservative)
        .collect();
    let row = &spec.retweet_weights[idx];
    let mut retweets = Vec::with_capacity(n_rt);
    for r in 0..n_rt {
        let pool = if (r < lib_rt && !lib_idx.is_empty()) || con_idx.is_empty() {
            &lib_idx
        } else {
            &con_idx
        };
        let Some(&ui) = pool.choose(&mut rng) else { break };
        let (user, side, _) = &users[ui];
        let mut u = rng.gen::<f64>();
        let mut dst = k - 1;
        for (j, &w) in row.iter().enumerate() {
            if u < w {
                dst = j;
                break;
            }
            u -= w;
        }
        while row[dst] == 0.0 {
            dst -= 1;
        }
        let dst_spec = &spec.communities[dst];
        let author = user_name(dst as CommunityId + 1, rng.gen_range(0..dst_spec.users));
        let text = sample_text(spec, c, *side, words, &mut rng);
        let ts = stamp(seq);
        lines.push((
            ts,
            json!({
                "tweet_id": format!("c{id}t{seq}"),
                "user_id": user.0,
                "text": text,
                "created_at": ts.to_rfc3339(),
                "is_retweet": true,
                "retweeted_user_id": author,
                "user_followers": followers[ui],
            })
            .to_string(),
        ));
        retweets.push(dst as CommunityId + 1);
        seq += 1;
    }
    CommunityOutput {
        lines,
        labels: users.into_iter().map(|(u, s, _)| (u, s)).collect(),
        retweets,
    }
}

/// Generate tweets, labels, the realized retweet network and the ground
/// truth for `spec`. Deterministic in `spec.seed`.
pub fn generate_scenario(spec: &ScenarioSpec) -> Result<Scenario, SynthError> {
    spec.validate()?;
    let lexicon = LexiconScorer::bundled();
    let (pos, neg) = lexicon.words();
    let words = Words { pos, neg };
    let outputs: Vec<CommunityOutput> = (0..spec.communities.len())
        .into_par_iter()
        .map(|i| generate_community(spec, i, &words))
        .collect();

    let mut stamped: Vec<(DateTime<Utc>, String)> = Vec::new();
    let mut labels = BTreeMap::new();
    let mut planted = BTreeMap::new();
    let mut counts: BTreeMap<(CommunityId, CommunityId), f64> = BTreeMap::new();
    for (i, out) in outputs.into_iter().enumerate() {
        let id = i as CommunityId + 1;
        stamped.extend(out.lines);
        for (u, s) in out.labels {
            planted.insert(u.clone(), id);
            labels.insert(u, s);
        }
        for j in out.retweets {
            *counts.entry((id, j)).or_insert(0.0) += 1.0;
        }
    }
    stamped.sort_by(|a, b| a.0.cmp(&b.0));
    let lines: Vec<String> = stamped.into_iter().map(|(_, l)| l).collect();
    let cutoff = DateTime::<Utc>::MAX_UTC;
    let (store, report) = parse_tweet_records(lines.join("\n").as_bytes(), cutoff)
        .map_err(|e| invalid(format!("generated records failed to parse: {e}")))?;
    if report.skipped_malformed > 0 {
        return Err(invalid(format!(
            "generated {} malformed records",
            report.skipped_malformed
        )));
    }
    Ok(Scenario {
        lines,
        store,
        labels,
        planted,
        retweet_network: RetweetNetwork::from_counts(1..=spec.communities.len() as CommunityId, &counts),
        truth: spec.ground_truth()?,
        targets: spec.target_list(),
    })
}

impl Scenario {
    /// Write `tweets.jsonl`, `labels.csv`, `ground_truth.csv` and
    /// `targets.csv` into `dir`.
    pub fn write_to(&self, dir: &Path, manifest: Option<&str>) -> Result<(), SynthError> {
        fs::create_dir_all(dir)?;
        let mut tweets = std::io::BufWriter::new(fs::File::create(dir.join("tweets.jsonl"))?);
        if let Some(m) = manifest {
            writeln!(tweets, "{}", json!({ "_manifest": m }))?;
        }
        for l in &self.lines {
            writeln!(tweets, "{l}")?;
        }
        tweets.flush()?;

        let mut labels = String::new();
        if let Some(m) = manifest {
            labels.push_str(&format!("# manifest: {m}\n"));
        }
        labels.push_str("user_id,label\n");
        for (u, s) in &self.labels {
            labels.push_str(&format!("{},{}\n", u.0, s.as_str()));
        }
        fs::write(dir.join("labels.csv"), labels)?;

        let mut gt = Vec::new();
        self.truth.write_csv(&mut gt, manifest)?;
        fs::write(dir.join("ground_truth.csv"), gt)?;

        let mut targets = String::new();
        if let Some(m) = manifest {
            targets.push_str(&format!("# manifest: {m}\n"));
        }
        targets.push_str("name,kind\n");
        for t in &self.targets {
            let kind = match t.kind {
                TargetKind::Person => "person",
                TargetKind::Group => "group",
            };
            targets.push_str(&format!("{},{kind}\n", t.name));
        }
        fs::write(dir.join("targets.csv"), targets)?;
        Ok(())
    }
}

/// Closed-form expected rating of every target by every planted community.
pub fn analytic_truth(spec: &ScenarioSpec) -> Result<TruthMatrix, SynthError> {
    let gt = spec.ground_truth()?;
    let mut m = TruthMatrix::new();
    for (i, c) in spec.communities.iter().enumerate() {
        for t in &spec.targets {
            let (l, k) = gt.rows[&t.name];
            m.insert(
                (i as CommunityId + 1, t.name.clone()),
                c.r_lib * l + (1.0 - c.r_lib) * k,
            );
        }
    }
    Ok(m)
}

/// Parameters of a planted-partition user-outlet graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantedSpec {
    pub blocks: usize,
    pub users_per_block: usize,
    pub outlets_per_block: usize,
    pub intra_weight: u64,
    pub inter_weight: u64,
    /// chance of each within-block user-outlet edge
    pub p_intra: f64,
    /// chance of each cross-block user-outlet edge
    pub p_inter: f64,
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        PlantedSpec {
            blocks: 4,
            users_per_block: 30,
            outlets_per_block: 8,
            intra_weight: 10,
            inter_weight: 1,
            p_intra: 0.6,
            p_inter: 0.3,
            seed: 0,
        }
    }
}

/// A random bipartite graph whose blocks each pair a user group with an
/// outlet group. Every user gets at least one within-block edge. Returns the
/// network and each node's block.
pub fn planted_bipartite(spec: &PlantedSpec) -> (CoSharingNetwork, BTreeMap<NodeId, usize>) {
    let mut rng = seed::rng(spec.seed, &[seed::tag("planted")]);
    let mut net = CoSharingNetwork::default();
    let mut labels = BTreeMap::new();
    let outlet = |b: usize, o: usize| format!("b{b}o{o:03}");
    for b in 0..spec.blocks {
        for o in 0..spec.outlets_per_block {
            net.outlets.insert(outlet(b, o));
            labels.insert(NodeId::Outlet(outlet(b, o)), b);
        }
    }
    for b in 0..spec.blocks {
        for u in 0..spec.users_per_block {
            let user = UserId(format!("b{b}u{u:03}"));
            labels.insert(NodeId::User(user.clone()), b);
            net.users.insert(user.clone());
            let forced = rng.gen_range(0..spec.outlets_per_block);
            for ob in 0..spec.blocks {
                for o in 0..spec.outlets_per_block {
                    let (p, w) = if ob == b {
                        (spec.p_intra, spec.intra_weight)
                    } else {
                        (spec.p_inter, spec.inter_weight)
                    };
                    if (ob == b && o == forced) || rng.gen::<f64>() < p {
                        net.edges.insert((user.clone(), outlet(ob, o)), w);
                    }
                }
            }
        }
    }
    (net, labels)
}
