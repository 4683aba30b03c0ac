//! The user/outlet co-sharing network and the directed community retweet
//! network.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ingest::{TweetStore, UserId};
use crate::seed;
use crate::CommunityId;

/// Bipartite graph between users and news outlets. The weight of `(u, v)` is
/// the number of tweets by `u` linking outlet `v`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CoSharingNetwork {
    pub users: BTreeSet<UserId>,
    pub outlets: BTreeSet<String>,
    pub edges: BTreeMap<(UserId, String), u64>,
}

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("network json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("node {node} out-weights sum to {sum}, expected 1")]
    NotNormalized { node: CommunityId, sum: f64 },
    #[error("negative edge weight {weight} on {src}->{dst}")]
    NegativeWeight {
        src: CommunityId,
        dst: CommunityId,
        weight: f64,
    },
}

#[derive(Serialize, Deserialize)]
struct CoSharingJson {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    manifest: Option<String>,
    users: Vec<String>,
    outlets: Vec<String>,
    edges: Vec<(String, String, u64)>,
}

impl CoSharingNetwork {
    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn total_weight(&self) -> u64 {
        self.edges.values().sum()
    }

    pub fn to_json(&self, manifest: Option<&str>) -> String {
        let doc = CoSharingJson {
            manifest: manifest.map(str::to_string),
            users: self.users.iter().map(|u| u.0.clone()).collect(),
            outlets: self.outlets.iter().cloned().collect(),
            edges: self
                .edges
                .iter()
                .map(|((u, v), w)| (u.0.clone(), v.clone(), *w))
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("plain data serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, GraphError> {
        let doc: CoSharingJson = serde_json::from_str(s)?;
        let mut net = CoSharingNetwork {
            users: doc.users.into_iter().map(UserId).collect(),
            outlets: doc.outlets.into_iter().collect(),
            edges: BTreeMap::new(),
        };
        for (u, v, w) in doc.edges {
            net.edges.insert((UserId(u), v), w);
        }
        Ok(net)
    }
}

/// Count, for every selected user, how many of their tweets link each outlet.
/// A tweet linking the same outlet twice counts once. Users with no links are
/// left out.
pub fn build_cosharing_network(store: &TweetStore, users: &BTreeSet<UserId>) -> CoSharingNetwork {
    let edges = store
        .records
        .par_iter()
        .filter(|r| users.contains(&r.user_id))
        .fold(BTreeMap::<(UserId, String), u64>::new, |mut acc, r| {
            let mut seen: Vec<&str> = Vec::with_capacity(r.domains.len());
            for d in &r.domains {
                if !seen.contains(&d.as_str()) {
                    seen.push(d);
                    *acc.entry((r.user_id.clone(), d.clone())).or_insert(0) += 1;
                }
            }
            acc
        })
        .reduce(BTreeMap::new, |mut a, b| {
            for (k, v) in b {
                *a.entry(k).or_insert(0) += v;
            }
            a
        });
    let mut net = CoSharingNetwork::default();
    for (u, v) in edges.keys() {
        net.users.insert(u.clone());
        net.outlets.insert(v.clone());
    }
    net.edges = edges;
    net
}

/// Directed graph over communities. `w_ij` is the fraction of community i's
/// retweets that target members of community j; self-loops allowed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RetweetNetwork {
    pub nodes: BTreeSet<CommunityId>,
    pub edges: BTreeMap<(CommunityId, CommunityId), f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetweetBuildReport {
    pub counted: u64,
    pub skipped_unassigned: u64,
    pub quotes_ignored: u64,
}

#[derive(Serialize, Deserialize)]
struct RetweetJson {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    manifest: Option<String>,
    nodes: Vec<CommunityId>,
    edges: Vec<(CommunityId, CommunityId, f64)>,
}

impl RetweetNetwork {
    /// Build from raw counts, normalizing each node's out-edges to sum to 1.
    pub fn from_counts(
        nodes: impl IntoIterator<Item = CommunityId>,
        counts: &BTreeMap<(CommunityId, CommunityId), f64>,
    ) -> Self {
        let mut nodes: BTreeSet<CommunityId> = nodes.into_iter().collect();
        let mut out_sum: BTreeMap<CommunityId, f64> = BTreeMap::new();
        for (&(i, j), &c) in counts {
            if c > 0.0 {
                *out_sum.entry(i).or_insert(0.0) += c;
                nodes.insert(i);
                nodes.insert(j);
            }
        }
        let edges = counts
            .iter()
            .filter(|(_, &c)| c > 0.0)
            .map(|(&(i, j), &c)| ((i, j), c / out_sum[&i]))
            .collect();
        RetweetNetwork { nodes, edges }
    }

    /// `(j, w_ij)` for every out-edge of `i`, ascending by `j`.
    pub fn out_edges(&self, i: CommunityId) -> Vec<(CommunityId, f64)> {
        self.edges
            .range((i, CommunityId::MIN)..=(i, CommunityId::MAX))
            .map(|(&(_, j), &w)| (j, w))
            .collect()
    }

    pub fn weight(&self, i: CommunityId, j: CommunityId) -> f64 {
        self.edges.get(&(i, j)).copied().unwrap_or(0.0)
    }

    pub fn out_sum(&self, i: CommunityId) -> f64 {
        self.out_edges(i).iter().map(|(_, w)| w).sum()
    }

    /// Check that weights are non-negative and that every node with out-edges
    /// sums to 1 within `1e-9`.
    pub fn validate(&self) -> Result<(), GraphError> {
        for (&(src, dst), &weight) in &self.edges {
            if !(weight >= 0.0) {
                return Err(GraphError::NegativeWeight { src, dst, weight });
            }
        }
        for &node in &self.nodes {
            let edges = self.out_edges(node);
            if edges.is_empty() {
                continue;
            }
            let sum: f64 = edges.iter().map(|(_, w)| w).sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(GraphError::NotNormalized { node, sum });
            }
        }
        Ok(())
    }

    /// Only self-loops of weight 1 on every node.
    pub fn identity(nodes: impl IntoIterator<Item = CommunityId>) -> Self {
        let nodes: BTreeSet<CommunityId> = nodes.into_iter().collect();
        let edges = nodes.iter().map(|&n| ((n, n), 1.0)).collect();
        RetweetNetwork { nodes, edges }
    }

    pub fn to_json(&self, manifest: Option<&str>) -> String {
        let doc = RetweetJson {
            manifest: manifest.map(str::to_string),
            nodes: self.nodes.iter().copied().collect(),
            edges: self.edges.iter().map(|(&(i, j), &w)| (i, j, w)).collect(),
        };
        serde_json::to_string_pretty(&doc).expect("plain data serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, GraphError> {
        let doc: RetweetJson = serde_json::from_str(s)?;
        let mut nodes: BTreeSet<CommunityId> = doc.nodes.into_iter().collect();
        let mut edges = BTreeMap::new();
        for (i, j, w) in doc.edges {
            nodes.insert(i);
            nodes.insert(j);
            edges.insert((i, j), w);
        }
        let net = RetweetNetwork { nodes, edges };
        net.validate()?;
        Ok(net)
    }

    /// Graphviz rendering. Edges below `min_weight` are hidden from the
    /// drawing only.
    pub fn to_dot(&self, min_weight: f64) -> String {
        let mut out = String::from("digraph retweets {\n");
        for n in &self.nodes {
            let _ = writeln!(out, "  c{n} [label=\"{n}\"];");
        }
        for (&(i, j), &w) in &self.edges {
            if w >= min_weight {
                let _ = writeln!(out, "  c{i} -> c{j} [label=\"{w:.2}\", penwidth={:.2}];", 0.5 + 4.0 * w);
            }
        }
        out.push_str("}\n");
        out
    }
}

/// Community-level retweet graph. Only pure retweets count (quotes are
/// ignored); retweets where either side has no community are skipped and
/// counted in the report. Every community in `assignment` becomes a node.
pub fn build_community_retweet_network(
    store: &TweetStore,
    assignment: &BTreeMap<UserId, CommunityId>,
) -> (RetweetNetwork, RetweetBuildReport) {
    let (counts, report) = store
        .records
        .par_iter()
        .fold(
            || {
                (
                    BTreeMap::<(CommunityId, CommunityId), u64>::new(),
                    RetweetBuildReport::default(),
                )
            },
            |(mut counts, mut rep), r| {
                if r.is_quote {
                    rep.quotes_ignored += 1;
                    return (counts, rep);
                }
                if !r.is_retweet {
                    return (counts, rep);
                }
                let src = assignment.get(&r.user_id);
                let dst = r.retweeted_user_id.as_ref().and_then(|b| assignment.get(b));
                match (src, dst) {
                    (Some(&a), Some(&b)) => {
                        *counts.entry((a, b)).or_insert(0) += 1;
                        rep.counted += 1;
                    }
                    _ => rep.skipped_unassigned += 1,
                }
                (counts, rep)
            },
        )
        .reduce(
            || (BTreeMap::new(), RetweetBuildReport::default()),
            |(mut a, ra), (b, rb)| {
                for (k, v) in b {
                    *a.entry(k).or_insert(0) += v;
                }
                (
                    a,
                    RetweetBuildReport {
                        counted: ra.counted + rb.counted,
                        skipped_unassigned: ra.skipped_unassigned + rb.skipped_unassigned,
                        quotes_ignored: ra.quotes_ignored + rb.quotes_ignored,
                    },
                )
            },
        );
    let counts: BTreeMap<_, f64> = counts.into_iter().map(|(k, v)| (k, v as f64)).collect();
    let nodes: BTreeSet<CommunityId> = assignment.values().copied().collect();
    (RetweetNetwork::from_counts(nodes, &counts), report)
}

/// Same topology, new weights: each out-edge gets a uniform draw from (0, 1],
/// then each node is renormalized.
pub fn randomize_retweet_weights(net: &RetweetNetwork, seed: u64) -> RetweetNetwork {
    let mut rng = seed::rng(seed, &[seed::tag("randomize-retweet")]);
    let mut raw = BTreeMap::new();
    for &k in net.edges.keys() {
        // gen::<f64>() is in [0, 1); flip to (0, 1] so no edge vanishes
        let w: f64 = 1.0 - rng.gen::<f64>();
        raw.insert(k, w);
    }
    RetweetNetwork::from_counts(net.nodes.iter().copied(), &raw)
}
