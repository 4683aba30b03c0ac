//! Community corpora and the stratified message passing update between them.
//!
//! A corpus `D_i` is the ordered list of community `i`'s tweets, each tagged
//! with the ideology stratum of its author. One message passing step replaces
//! `D_i` with a mixture of its out-neighbors' corpora on the retweet network:
//!
//! ```text
//! D'_i = sum over j in N+(i) of  sample(D_j^lib, w_ij * r_i^lib * |D_i|)
//!                              + sample(D_j^con, w_ij * r_i^con * |D_i|)
//! ```
//!
//! Note that the ideology ratio is the *receiving* community's, so `D'_i`
//! keeps `i`'s liberal/conservative balance while importing what its
//! neighbors say. The new corpus has exactly `|D_i|` tweets.
//!
//! Counts are made integral with largest-remainder rounding at two levels:
//! per neighbor (`w_ij * |D_i|`) and per stratum over the whole corpus, and
//! the per-neighbor stratum split is then rounded to hit both sets of totals
//! exactly. Tweets by users of unknown ideology form a third stratum that is
//! sampled in proportion to its share of `D_i`, shrinking the liberal and
//! conservative requests pro rata.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::apportion::{bounded_round, largest_remainder};
use crate::community::Community;
use crate::graph::RetweetNetwork;
use crate::ideology::{Ideology, IdeologyMix};
use crate::ingest::TweetStore;
use crate::seed;
use crate::CommunityId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusTweet {
    pub text: Arc<str>,
    pub stratum: Ideology,
    /// Community whose member wrote the tweet.
    pub origin: CommunityId,
    /// Corpus this copy was last sampled from; equals `origin` before any
    /// message passing.
    pub source: CommunityId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub community_id: CommunityId,
    pub tweets: Vec<CorpusTweet>,
    /// The community's own ideology mix. Message passing keeps this fixed.
    pub mix: IdeologyMix,
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("corpus {0} has no liberal or conservative tweets")]
    NoLabeledTweets(CommunityId),
    #[error("community {community} needs {needed} tweets from corpus {neighbor}, which is empty")]
    EmptyNeighbor {
        community: CommunityId,
        neighbor: CommunityId,
        needed: u64,
    },
    #[error("no corpus for community {0}")]
    MissingCorpus(CommunityId),
    #[error("corpus line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Recoverable anomalies surfaced by message passing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum MpWarning {
    /// The community has no out-edges; its corpus was left unchanged.
    NoOutEdges { community: CommunityId },
    /// A requested stratum was empty in a neighbor; the tweets were drawn
    /// from the neighbor's other strata instead.
    StratumFallback {
        community: CommunityId,
        neighbor: CommunityId,
        stratum: Ideology,
        count: u64,
    },
}

impl std::fmt::Display for MpWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MpWarning::NoOutEdges { community } => {
                write!(f, "community {community} has no out-edges; corpus unchanged")
            }
            MpWarning::StratumFallback {
                community,
                neighbor,
                stratum,
                count,
            } => write!(
                f,
                "community {community}: neighbor {neighbor} has no {} tweets; drew {count} from its other strata",
                stratum.as_str()
            ),
        }
    }
}

const STRATA: [Ideology; 3] = [Ideology::Liberal, Ideology::Conservative, Ideology::Unknown];

fn stratum_index(s: Ideology) -> usize {
    match s {
        Ideology::Liberal => 0,
        Ideology::Conservative => 1,
        Ideology::Unknown => 2,
    }
}

/// Target shares of each stratum, liberal/conservative/unknown, summing to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StratumShares {
    pub lib: f64,
    pub con: f64,
    pub unknown: f64,
}

impl StratumShares {
    fn as_array(&self) -> [f64; 3] {
        [self.lib, self.con, self.unknown]
    }
}

impl From<IdeologyMix> for StratumShares {
    fn from(mix: IdeologyMix) -> Self {
        StratumShares {
            lib: mix.r_lib(),
            con: mix.r_con(),
            unknown: 0.0,
        }
    }
}

impl Corpus {
    /// Build a corpus, deriving its mix from the tweets' strata.
    pub fn new(community_id: CommunityId, tweets: Vec<CorpusTweet>) -> Result<Self, CorpusError> {
        let [lib, con, _] = count_strata(&tweets);
        let mix = IdeologyMix::from_counts(lib, con).ok_or(CorpusError::NoLabeledTweets(community_id))?;
        Ok(Corpus {
            community_id,
            tweets,
            mix,
        })
    }

    /// Corpus from `(text, stratum)` pairs authored in this community.
    pub fn from_texts<S: AsRef<str>>(
        community_id: CommunityId,
        texts: impl IntoIterator<Item = (S, Ideology)>,
    ) -> Result<Self, CorpusError> {
        let tweets = texts
            .into_iter()
            .map(|(t, s)| CorpusTweet {
                text: Arc::from(t.as_ref()),
                stratum: s,
                origin: community_id,
                source: community_id,
            })
            .collect();
        Corpus::new(community_id, tweets)
    }

    pub fn len(&self) -> usize {
        self.tweets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tweets.is_empty()
    }

    /// Tweet counts per stratum: liberal, conservative, unknown.
    pub fn stratum_counts(&self) -> [u64; 3] {
        count_strata(&self.tweets)
    }

    pub fn stratum(&self, s: Ideology) -> impl Iterator<Item = &CorpusTweet> {
        self.tweets.iter().filter(move |t| t.stratum == s)
    }

    /// Liberal fraction among labeled tweets actually in the corpus.
    pub fn realized_mix(&self) -> Option<IdeologyMix> {
        let [lib, con, _] = self.stratum_counts();
        IdeologyMix::from_counts(lib, con)
    }

    /// Shares to request when refilling this corpus: the unknown stratum keeps
    /// its current share, the rest splits by the community mix.
    pub fn refill_shares(&self) -> StratumShares {
        let n = self.len().max(1) as f64;
        let unknown = self.stratum_counts()[2] as f64 / n;
        StratumShares {
            lib: (1.0 - unknown) * self.mix.r_lib(),
            con: (1.0 - unknown) * self.mix.r_con(),
            unknown,
        }
    }

    /// JSON-lines dump: one `{text, stratum, origin, source}` object per line,
    /// preceded by a header line holding the community id and mix.
    pub fn write_jsonl<W: Write>(&self, mut w: W, manifest: Option<&str>) -> Result<(), CorpusError> {
        let header = CorpusHeader {
            manifest: manifest.map(str::to_string),
            community_id: self.community_id,
            r_lib: self.mix.r_lib(),
        };
        serde_json::to_writer(&mut w, &header).map_err(|e| CorpusError::Json { line: 1, source: e })?;
        w.write_all(b"\n")?;
        for (i, t) in self.tweets.iter().enumerate() {
            serde_json::to_writer(&mut w, t).map_err(|e| CorpusError::Json { line: i + 2, source: e })?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Corpus, CorpusError> {
        let mut lines = reader.lines();
        let header_line = lines.next().transpose()?.unwrap_or_default();
        let header: CorpusHeader =
            serde_json::from_str(&header_line).map_err(|e| CorpusError::Json { line: 1, source: e })?;
        let mut tweets = Vec::new();
        for (i, l) in lines.enumerate() {
            let l = l?;
            if l.trim().is_empty() {
                continue;
            }
            tweets.push(serde_json::from_str(&l).map_err(|e| CorpusError::Json { line: i + 2, source: e })?);
        }
        let mix = IdeologyMix::new(header.r_lib).map_err(|_| CorpusError::NoLabeledTweets(header.community_id))?;
        Ok(Corpus {
            community_id: header.community_id,
            tweets,
            mix,
        })
    }
}

/// One corpus per community from the non-empty texts its users wrote, in
/// store order, each tagged with its author's ideology.
pub fn build_corpora(
    store: &TweetStore,
    communities: &[Community],
) -> Result<BTreeMap<CommunityId, Corpus>, CorpusError> {
    communities
        .par_iter()
        .map(|c| {
            let tweets = store
                .records
                .iter()
                .filter(|r| !r.text.is_empty() && c.users.contains(&r.user_id))
                .map(|r| CorpusTweet {
                    text: Arc::from(r.text.as_str()),
                    stratum: store.ideology_of(&r.user_id),
                    origin: c.id,
                    source: c.id,
                })
                .collect();
            Corpus::new(c.id, tweets).map(|corpus| (c.id, corpus))
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    #[serde(default, skip_serializing_if = "Option::is_none", rename = "_manifest")]
    manifest: Option<String>,
    community_id: CommunityId,
    r_lib: f64,
}

fn count_strata(tweets: &[CorpusTweet]) -> [u64; 3] {
    let mut c = [0u64; 3];
    for t in tweets {
        c[stratum_index(t.stratum)] += 1;
    }
    c
}

/// Per-stratum request sizes for `k` tweets: largest remainder over the
/// shares, exact ties going to the larger share.
pub fn stratum_quotas(k: u64, shares: &StratumShares) -> [u64; 3] {
    let v = largest_remainder(k, &shares.as_array());
    [v[0], v[1], v[2]]
}

/// Draw `counts[s]` tweets from each stratum `s` of `corpus`. Without
/// replacement when the stratum is big enough, with replacement otherwise.
/// An empty stratum falls back to the pool of the corpus's other strata.
fn sample_strata(
    corpus: &Corpus,
    counts: [u64; 3],
    recipient: CommunityId,
    rng: &mut seed::Rng,
    warnings: &mut Vec<MpWarning>,
) -> Result<Vec<CorpusTweet>, CorpusError> {
    let mut pools: [Vec<usize>; 3] = Default::default();
    for (i, t) in corpus.tweets.iter().enumerate() {
        pools[stratum_index(t.stratum)].push(i);
    }
    let mut out = Vec::with_capacity(counts.iter().sum::<u64>() as usize);
    for (s, &need) in counts.iter().enumerate() {
        if need == 0 {
            continue;
        }
        let fallback: Vec<usize>;
        let pool: &[usize] = if pools[s].is_empty() {
            // liberal and conservative fall back to each other first
            let alt = match s {
                0 => vec![1, 2],
                1 => vec![0, 2],
                _ => vec![0, 1],
            };
            fallback = alt
                .iter()
                .find(|&&a| !pools[a].is_empty())
                .map(|&a| pools[a].clone())
                .unwrap_or_default();
            if fallback.is_empty() {
                return Err(CorpusError::EmptyNeighbor {
                    community: recipient,
                    neighbor: corpus.community_id,
                    needed: need,
                });
            }
            let w = MpWarning::StratumFallback {
                community: recipient,
                neighbor: corpus.community_id,
                stratum: STRATA[s],
                count: need,
            };
            log::warn!("{w}");
            warnings.push(w);
            &fallback
        } else {
            &pools[s]
        };
        let need = need as usize;
        if need <= pool.len() {
            for i in index::sample(rng, pool.len(), need) {
                out.push(resampled(&corpus.tweets[pool[i]], corpus.community_id));
            }
        } else {
            for _ in 0..need {
                let i = rng.gen_range(0..pool.len());
                out.push(resampled(&corpus.tweets[pool[i]], corpus.community_id));
            }
        }
    }
    Ok(out)
}

fn resampled(t: &CorpusTweet, from: CommunityId) -> CorpusTweet {
    CorpusTweet {
        text: Arc::clone(&t.text),
        stratum: t.stratum,
        origin: t.origin,
        source: from,
    }
}

/// Sample `k` tweets from `corpus` split across strata by `shares`.
pub fn stratified_sample(
    corpus: &Corpus,
    k: u64,
    shares: &StratumShares,
    rng: &mut seed::Rng,
) -> Result<(Vec<CorpusTweet>, Vec<MpWarning>), CorpusError> {
    let mut warnings = Vec::new();
    let counts = stratum_quotas(k, shares);
    let tweets = sample_strata(corpus, counts, corpus.community_id, rng, &mut warnings)?;
    Ok((tweets, warnings))
}

/// How many tweets of each stratum community `i` takes from each neighbor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MpPlan {
    pub community: CommunityId,
    /// `(neighbor, [lib, con, unknown])`, ascending by neighbor id.
    pub draws: Vec<(CommunityId, [u64; 3])>,
}

impl MpPlan {
    pub fn total(&self) -> u64 {
        self.draws.iter().map(|(_, c)| c.iter().sum::<u64>()).sum()
    }

    pub fn stratum_totals(&self) -> [u64; 3] {
        let mut t = [0; 3];
        for (_, c) in &self.draws {
            for s in 0..3 {
                t[s] += c[s];
            }
        }
        t
    }
}

/// Integer draw counts for community `i`: neighbor totals and corpus-wide
/// stratum totals are each rounded by largest remainder, then the
/// neighbor-by-stratum table is rounded to match both margins.
pub fn plan_message_pass(i: CommunityId, net: &RetweetNetwork, corpus: &Corpus) -> Option<MpPlan> {
    let edges = net.out_edges(i);
    if edges.is_empty() {
        return None;
    }
    let size = corpus.len() as u64;
    let weights: Vec<f64> = edges.iter().map(|(_, w)| *w).collect();
    let per_neighbor = largest_remainder(size, &weights);
    let shares = corpus.refill_shares();
    let totals = stratum_quotas(size, &shares);
    let share = shares.as_array();

    let lib_quota: Vec<f64> = per_neighbor.iter().map(|&c| c as f64 * share[0]).collect();
    let lib = bounded_round(&lib_quota, &per_neighbor, totals[0]);
    let caps: Vec<u64> = per_neighbor.iter().zip(&lib).map(|(c, l)| c - l).collect();
    let unk_quota: Vec<f64> = per_neighbor.iter().map(|&c| c as f64 * share[2]).collect();
    let unk = bounded_round(&unk_quota, &caps, totals[2]);

    let draws = edges
        .iter()
        .enumerate()
        .map(|(n, &(j, _))| {
            let l = lib[n];
            let u = unk[n];
            (j, [l, per_neighbor[n] - l - u, u])
        })
        .collect();
    Some(MpPlan { community: i, draws })
}

/// Replace community `i`'s corpus with a size-preserving, stratified mixture of
/// its out-neighbors' corpora. Without out-edges the corpus is returned
/// unchanged along with a warning.
pub fn message_pass(
    i: CommunityId,
    net: &RetweetNetwork,
    corpora: &BTreeMap<CommunityId, Corpus>,
    rng: &mut seed::Rng,
) -> Result<(Corpus, Vec<MpWarning>), CorpusError> {
    let own = corpora.get(&i).ok_or(CorpusError::MissingCorpus(i))?;
    let Some(plan) = plan_message_pass(i, net, own) else {
        let w = MpWarning::NoOutEdges { community: i };
        log::warn!("{w}");
        return Ok((own.clone(), vec![w]));
    };
    let mut warnings = Vec::new();
    let mut tweets = Vec::with_capacity(own.len());
    for (j, counts) in &plan.draws {
        if counts.iter().all(|&c| c == 0) {
            continue;
        }
        let neighbor = corpora.get(j).ok_or(CorpusError::MissingCorpus(*j))?;
        tweets.extend(sample_strata(neighbor, *counts, i, rng, &mut warnings)?);
    }
    Ok((
        Corpus {
            community_id: i,
            tweets,
            mix: own.mix,
        },
        warnings,
    ))
}

/// One synchronous round: every community reads the pre-round corpora, then
/// all corpora are replaced at once. Each community samples from its own
/// generator derived from `seed`, so the result is independent of thread
/// scheduling.
pub fn run_message_passing_round(
    corpora: &BTreeMap<CommunityId, Corpus>,
    net: &RetweetNetwork,
    seed: u64,
) -> Result<(BTreeMap<CommunityId, Corpus>, Vec<MpWarning>), CorpusError> {
    let results: Vec<Result<(CommunityId, Corpus, Vec<MpWarning>), CorpusError>> = corpora
        .keys()
        .copied()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::rng(seed, &[seed::tag("message-pass"), u64::from(i)]);
            message_pass(i, net, corpora, &mut rng).map(|(c, w)| (i, c, w))
        })
        .collect();
    let mut out = BTreeMap::new();
    let mut warnings = Vec::new();
    for r in results {
        let (i, c, w) = r?;
        out.insert(i, c);
        warnings.extend(w);
    }
    Ok((out, warnings))
}
