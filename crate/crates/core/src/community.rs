//! Weighted Louvain community detection on the co-sharing network.
//!
//! The bipartite user/outlet graph is treated as an ordinary weighted
//! undirected graph under Newman modularity with a resolution parameter
//! `gamma`:
//!
//! ```text
//! Q = 1/2m * sum_ij [ A_ij - gamma * k_i k_j / 2m ] * delta(c_i, c_j)
//! ```
//!
//! Louvain alternates a local-move phase (each node joins the neighboring
//! community with the best modularity gain) with aggregation of communities
//! into super-nodes, until a level produces no merge. The local-move visiting
//! order is a seeded shuffle, so a given seed always yields the same
//! partition.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::graph::CoSharingNetwork;
use crate::ingest::{TweetStore, UserId};
use crate::seed;
use crate::CommunityId;

/// Minimum modularity gain (in units of edge weight) for a node to move.
const MIN_GAIN: f64 = 1e-12;
const MAX_LEVELS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "lowercase")]
pub enum NodeId {
    User(UserId),
    Outlet(String),
}

/// Symmetric weighted adjacency. `adj[i]` holds `(j, A_ij)` sorted by `j`;
/// a self-loop of weight `w` is stored as `A_ii = 2w`.
#[derive(Debug, Clone)]
pub struct WeightedGraph {
    adj: Vec<Vec<(usize, f64)>>,
}

impl WeightedGraph {
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Self {
        let mut maps: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
        for &(u, v, w) in edges {
            if u == v {
                *maps[u].entry(u).or_insert(0.0) += 2.0 * w;
            } else {
                *maps[u].entry(v).or_insert(0.0) += w;
                *maps[v].entry(u).or_insert(0.0) += w;
            }
        }
        WeightedGraph {
            adj: maps.into_iter().map(|m| m.into_iter().collect()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.adj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adj.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adj[i]
    }

    fn strengths(&self) -> Vec<f64> {
        self.adj.iter().map(|row| row.iter().map(|(_, w)| w).sum()).collect()
    }

    /// Twice the total edge weight.
    pub fn two_m(&self) -> f64 {
        self.strengths().iter().sum()
    }

    /// Modularity of the labeling `membership` (any integer labels).
    pub fn modularity(&self, membership: &[usize], resolution: f64) -> f64 {
        let two_m = self.two_m();
        if two_m == 0.0 {
            return 0.0;
        }
        let k = self.strengths();
        let mut inside: BTreeMap<usize, f64> = BTreeMap::new();
        let mut total: BTreeMap<usize, f64> = BTreeMap::new();
        for i in 0..self.len() {
            *total.entry(membership[i]).or_insert(0.0) += k[i];
            for &(j, w) in &self.adj[i] {
                if membership[i] == membership[j] {
                    *inside.entry(membership[i]).or_insert(0.0) += w;
                }
            }
        }
        total
            .iter()
            .map(|(c, &tot)| inside.get(c).copied().unwrap_or(0.0) / two_m - resolution * (tot / two_m).powi(2))
            .sum()
    }

    fn aggregate(&self, membership: &[usize], count: usize) -> WeightedGraph {
        let mut maps: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); count];
        for i in 0..self.len() {
            for &(j, w) in &self.adj[i] {
                *maps[membership[i]].entry(membership[j]).or_insert(0.0) += w;
            }
        }
        WeightedGraph {
            adj: maps.into_iter().map(|m| m.into_iter().collect()).collect(),
        }
    }
}

/// One local-move phase. Returns dense labels `0..count` and whether any node
/// moved.
fn local_moves(g: &WeightedGraph, resolution: f64, rng: &mut seed::Rng) -> (Vec<usize>, bool) {
    let n = g.len();
    let k = g.strengths();
    let two_m: f64 = k.iter().sum();
    let mut comm: Vec<usize> = (0..n).collect();
    let mut tot = k.clone();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);

    let mut link = vec![0.0f64; n];
    let mut mark = vec![usize::MAX; n];
    let mut touched: Vec<usize> = Vec::new();
    let mut moved_any = false;
    loop {
        let mut moved = false;
        for &i in &order {
            let ci = comm[i];
            touched.clear();
            for &(j, w) in g.neighbors(i) {
                if j == i {
                    continue;
                }
                let cj = comm[j];
                if mark[cj] != i {
                    mark[cj] = i;
                    touched.push(cj);
                }
                link[cj] += w;
            }
            tot[ci] -= k[i];
            let gain = |c: usize, l: f64| l - resolution * tot[c] * k[i] / two_m;
            let mut best = ci;
            let mut best_gain = gain(ci, link[ci]);
            touched.sort_unstable();
            for &c in &touched {
                let g = gain(c, link[c]);
                if g > best_gain + MIN_GAIN {
                    best = c;
                    best_gain = g;
                }
            }
            tot[best] += k[i];
            if best != ci {
                comm[i] = best;
                moved = true;
                moved_any = true;
            }
            for &c in &touched {
                link[c] = 0.0;
                mark[c] = usize::MAX;
            }
        }
        if !moved {
            break;
        }
    }
    // relabel densely in order of first appearance by node index
    let mut remap = vec![usize::MAX; n];
    let mut next = 0;
    for c in comm.iter_mut() {
        if remap[*c] == usize::MAX {
            remap[*c] = next;
            next += 1;
        }
        *c = remap[*c];
    }
    (comm, moved_any)
}

/// Multi-level Louvain on a plain weighted graph. Returns a community label
/// per node (labels dense from 0, otherwise arbitrary).
pub fn louvain(g: &WeightedGraph, resolution: f64, seed: u64) -> Vec<usize> {
    let mut membership: Vec<usize> = (0..g.len()).collect();
    let mut level = g.clone();
    for depth in 0..MAX_LEVELS {
        let mut rng = seed::rng(seed, &[seed::tag("louvain"), depth as u64]);
        let (labels, moved) = local_moves(&level, resolution, &mut rng);
        let count = labels.iter().max().map_or(0, |m| m + 1);
        if !moved || count == level.len() {
            break;
        }
        for m in membership.iter_mut() {
            *m = labels[*m];
        }
        level = level.aggregate(&labels, count);
    }
    membership
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Community {
    pub id: CommunityId,
    pub users: BTreeSet<UserId>,
    pub outlets: BTreeSet<String>,
    /// Tweets authored by `users`; zero until [`Partition::count_tweets`] runs.
    pub tweet_count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub assignment: BTreeMap<NodeId, CommunityId>,
    pub communities: BTreeMap<CommunityId, Community>,
}

#[derive(Debug, thiserror::Error)]
pub enum CommunityError {
    #[error("co-sharing network has no edges")]
    EmptyNetwork,
    #[error("resolution must be positive, got {0}")]
    BadResolution(f64),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("partition json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Node list for a co-sharing network: users (sorted) then outlets (sorted).
pub fn cosharing_graph(net: &CoSharingNetwork) -> (Vec<NodeId>, WeightedGraph) {
    let mut nodes: Vec<NodeId> = net.users.iter().cloned().map(NodeId::User).collect();
    nodes.extend(net.outlets.iter().cloned().map(NodeId::Outlet));
    let index: BTreeMap<&NodeId, usize> = nodes.iter().enumerate().map(|(i, n)| (n, i)).collect();
    let edges: Vec<(usize, usize, f64)> = net
        .edges
        .iter()
        .map(|((u, v), &w)| {
            (
                index[&NodeId::User(u.clone())],
                index[&NodeId::Outlet(v.clone())],
                w as f64,
            )
        })
        .collect();
    let g = WeightedGraph::from_edges(nodes.len(), &edges);
    (nodes, g)
}

/// Detect communities. Ids run from 1 in descending order of user count;
/// equal sizes keep the order of their smallest member node.
pub fn louvain_partition(net: &CoSharingNetwork, resolution: f64, seed: u64) -> Result<Partition, CommunityError> {
    if !(resolution > 0.0) {
        return Err(CommunityError::BadResolution(resolution));
    }
    if net.is_empty() {
        return Err(CommunityError::EmptyNetwork);
    }
    let (nodes, g) = cosharing_graph(net);
    let labels = louvain(&g, resolution, seed);
    Ok(Partition::from_labels(&nodes, &labels))
}

impl Partition {
    /// Build from arbitrary labels, renumbering by descending user count.
    pub fn from_labels(nodes: &[NodeId], labels: &[usize]) -> Partition {
        let mut groups: BTreeMap<usize, Vec<&NodeId>> = BTreeMap::new();
        for (n, &l) in nodes.iter().zip(labels) {
            groups.entry(l).or_default().push(n);
        }
        let mut groups: Vec<Vec<&NodeId>> = groups.into_values().collect();
        for g in groups.iter_mut() {
            g.sort();
        }
        let users_in = |g: &Vec<&NodeId>| g.iter().filter(|n| matches!(n, NodeId::User(_))).count();
        groups.sort_by(|a, b| users_in(b).cmp(&users_in(a)).then_with(|| a[0].cmp(b[0])));

        let mut assignment = BTreeMap::new();
        let mut communities = BTreeMap::new();
        for (idx, g) in groups.into_iter().enumerate() {
            let id = idx as CommunityId + 1;
            let mut c = Community {
                id,
                users: BTreeSet::new(),
                outlets: BTreeSet::new(),
                tweet_count: 0,
            };
            for n in g {
                assignment.insert(n.clone(), id);
                match n {
                    NodeId::User(u) => {
                        c.users.insert(u.clone());
                    }
                    NodeId::Outlet(o) => {
                        c.outlets.insert(o.clone());
                    }
                }
            }
            communities.insert(id, c);
        }
        Partition {
            assignment,
            communities,
        }
    }

    pub fn len(&self) -> usize {
        self.communities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.communities.is_empty()
    }

    /// Fill each community's `tweet_count` from the store.
    pub fn count_tweets(&mut self, store: &TweetStore) {
        let mut counts: BTreeMap<CommunityId, u64> = BTreeMap::new();
        for r in &store.records {
            if let Some(&c) = self.assignment.get(&NodeId::User(r.user_id.clone())) {
                *counts.entry(c).or_insert(0) += 1;
            }
        }
        for (id, c) in self.communities.iter_mut() {
            c.tweet_count = counts.get(id).copied().unwrap_or(0);
        }
    }

    /// Community labels aligned with `nodes`; nodes outside the partition get
    /// a fresh label each.
    pub fn labels_for(&self, nodes: &[NodeId]) -> Vec<usize> {
        let mut next = self.communities.len() + 1;
        nodes
            .iter()
            .map(|n| match self.assignment.get(n) {
                Some(&c) => c as usize,
                None => {
                    next += 1;
                    next
                }
            })
            .collect()
    }

    /// Map from user to community, restricted to `communities`.
    pub fn user_assignment(&self, communities: &[Community]) -> BTreeMap<UserId, CommunityId> {
        communities
            .iter()
            .flat_map(|c| c.users.iter().map(move |u| (u.clone(), c.id)))
            .collect()
    }

    pub fn to_json(&self, manifest: Option<&str>) -> String {
        let doc = PartitionJson {
            manifest: manifest.map(str::to_string),
            users: self
                .assignment
                .iter()
                .filter_map(|(n, &c)| match n {
                    NodeId::User(u) => Some((u.0.clone(), c)),
                    _ => None,
                })
                .collect(),
            outlets: self
                .assignment
                .iter()
                .filter_map(|(n, &c)| match n {
                    NodeId::Outlet(o) => Some((o.clone(), c)),
                    _ => None,
                })
                .collect(),
            tweet_counts: self.communities.values().map(|c| (c.id, c.tweet_count)).collect(),
        };
        serde_json::to_string_pretty(&doc).expect("plain data serializes")
    }

    pub fn from_json(s: &str) -> Result<Partition, CommunityError> {
        let doc: PartitionJson = serde_json::from_str(s)?;
        let mut communities: BTreeMap<CommunityId, Community> = BTreeMap::new();
        let mut assignment = BTreeMap::new();
        let tweet_counts = &doc.tweet_counts;
        fn entry<'a>(
            communities: &'a mut BTreeMap<CommunityId, Community>,
            tweet_counts: &BTreeMap<CommunityId, u64>,
            id: CommunityId,
        ) -> &'a mut Community {
            communities.entry(id).or_insert_with(|| Community {
                id,
                users: BTreeSet::new(),
                outlets: BTreeSet::new(),
                tweet_count: tweet_counts.get(&id).copied().unwrap_or(0),
            })
        }
        for (u, &c) in &doc.users {
            entry(&mut communities, tweet_counts, c).users.insert(UserId(u.clone()));
            assignment.insert(NodeId::User(UserId(u.clone())), c);
        }
        for (o, &c) in &doc.outlets {
            entry(&mut communities, tweet_counts, c).outlets.insert(o.clone());
            assignment.insert(NodeId::Outlet(o.clone()), c);
        }
        Ok(Partition {
            assignment,
            communities,
        })
    }

    /// `id,users,tweets,top_outlets` with the five most-shared outlets of
    /// each community's users, `;`-separated.
    pub fn write_summary_csv<W: Write>(
        &self,
        net: &CoSharingNetwork,
        mut w: W,
        manifest: Option<&str>,
    ) -> Result<(), CommunityError> {
        if let Some(m) = manifest {
            writeln!(w, "# manifest: {m}")?;
        }
        let mut shares: BTreeMap<CommunityId, BTreeMap<&str, u64>> = BTreeMap::new();
        for ((u, v), &c) in &net.edges {
            if let Some(&id) = self.assignment.get(&NodeId::User(u.clone())) {
                *shares.entry(id).or_default().entry(v.as_str()).or_insert(0) += c;
            }
        }
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["id", "users", "tweets", "top_outlets"])?;
        for c in self.communities.values() {
            let mut top: Vec<(&str, u64)> = shares
                .get(&c.id)
                .map(|m| m.iter().map(|(k, v)| (*k, *v)).collect())
                .unwrap_or_default();
            top.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
            let names: Vec<&str> = top.iter().take(5).map(|(k, _)| *k).collect();
            out.write_record([
                c.id.to_string(),
                c.users.len().to_string(),
                c.tweet_count.to_string(),
                names.join(";"),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct PartitionJson {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    manifest: Option<String>,
    users: BTreeMap<String, CommunityId>,
    outlets: BTreeMap<String, CommunityId>,
    #[serde(default)]
    tweet_counts: BTreeMap<CommunityId, u64>,
}

/// Modularity of a partition of the co-sharing network.
pub fn modularity(net: &CoSharingNetwork, partition: &Partition, resolution: f64) -> f64 {
    let (nodes, g) = cosharing_graph(net);
    g.modularity(&partition.labels_for(&nodes), resolution)
}

/// The `k` largest communities by user count, ties by id. Asking for more
/// than exist returns all of them.
pub fn top_k_communities(partition: &Partition, k: usize) -> Result<Vec<Community>, CommunityError> {
    if k == 0 {
        return Err(CommunityError::ZeroK);
    }
    let mut all: Vec<&Community> = partition.communities.values().collect();
    all.sort_by(|a, b| b.users.len().cmp(&a.users.len()).then(a.id.cmp(&b.id)));
    Ok(all.into_iter().take(k).cloned().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_triangles() -> WeightedGraph {
        WeightedGraph::from_edges(
            6,
            &[
                (0, 1, 1.0),
                (1, 2, 1.0),
                (0, 2, 1.0),
                (3, 4, 1.0),
                (4, 5, 1.0),
                (3, 5, 1.0),
            ],
        )
    }

    #[test]
    fn one_community_is_zero() {
        let g = two_triangles();
        assert!(g.modularity(&[0; 6], 1.0).abs() < 1e-15);
        let g = WeightedGraph::from_edges(4, &[(0, 1, 3.0), (1, 2, 1.5), (2, 3, 0.5), (0, 3, 2.0)]);
        assert!(g.modularity(&[7; 4], 1.0).abs() < 1e-15);
    }

    #[test]
    fn two_cliques_half() {
        let g = two_triangles();
        assert!((g.modularity(&[0, 0, 0, 1, 1, 1], 1.0) - 0.5).abs() < 1e-15);
        let found = louvain(&g, 1.0, 3);
        assert_eq!(found[0], found[1]);
        assert_eq!(found[1], found[2]);
        assert_ne!(found[2], found[3]);
        assert!((g.modularity(&found, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn self_loops_count_twice() {
        let g = WeightedGraph::from_edges(2, &[(0, 0, 1.0), (0, 1, 1.0)]);
        assert_eq!(g.two_m(), 4.0);
    }

    fn star(net: &mut CoSharingNetwork, outlet: &str, users: &[&str]) {
        for u in users {
            net.users.insert(UserId::from(*u));
            net.outlets.insert(outlet.to_string());
            net.edges.insert((UserId::from(*u), outlet.to_string()), 2);
        }
    }

    #[test]
    fn disconnected_stars() {
        let mut net = CoSharingNetwork::default();
        star(&mut net, "a", &["u1", "u2", "u3"]);
        star(&mut net, "b", &["v1", "v2"]);
        let p = louvain_partition(&net, 1.0, 0).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p.communities[&1].users.len(), 3);
        assert_eq!(p.communities[&1].outlets, BTreeSet::from(["a".to_string()]));
        assert_eq!(p.communities[&2].outlets, BTreeSet::from(["b".to_string()]));
    }

    #[test]
    fn single_edge_merges() {
        let mut net = CoSharingNetwork::default();
        star(&mut net, "a", &["u1"]);
        let p = louvain_partition(&net, 1.0, 0).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.assignment.len(), 2);
    }

    #[test]
    fn errors() {
        let net = CoSharingNetwork::default();
        assert!(matches!(
            louvain_partition(&net, 1.0, 0),
            Err(CommunityError::EmptyNetwork)
        ));
        let mut net = CoSharingNetwork::default();
        star(&mut net, "a", &["u1"]);
        assert!(matches!(
            louvain_partition(&net, 0.0, 0),
            Err(CommunityError::BadResolution(_))
        ));
    }

    fn partition_of_sizes(sizes: &[usize]) -> Partition {
        let mut nodes = Vec::new();
        let mut labels = Vec::new();
        for (c, &s) in sizes.iter().enumerate() {
            for k in 0..s {
                nodes.push(NodeId::User(UserId(format!("c{c:02}u{k:03}"))));
                labels.push(c);
            }
        }
        Partition::from_labels(&nodes, &labels)
    }

    #[test]
    fn top_k() {
        let sizes: Vec<usize> = (0..42).map(|i| 1 + (i * 7) % 43).collect();
        let p = partition_of_sizes(&sizes);
        let top = top_k_communities(&p, 20).unwrap();
        assert_eq!(top.len(), 20);
        let mut sorted = sizes.clone();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        let got: Vec<usize> = top.iter().map(|c| c.users.len()).collect();
        assert_eq!(got, sorted[..20].to_vec());
        let one = top_k_communities(&p, 1).unwrap();
        assert_eq!(one[0].users.len(), *sorted.first().unwrap());
        assert_eq!(top_k_communities(&p, 100).unwrap().len(), 42);
        assert!(top_k_communities(&p, 0).is_err());
    }

    #[test]
    fn equal_sizes_lower_id_first() {
        let p = partition_of_sizes(&[3, 3]);
        let top = top_k_communities(&p, 2).unwrap();
        assert_eq!(top[0].id, 1);
        assert_eq!(top[1].id, 2);
    }

    #[test]
    fn ids_follow_size() {
        let p = partition_of_sizes(&[2, 5, 3]);
        let sizes: Vec<usize> = p.communities.values().map(|c| c.users.len()).collect();
        assert_eq!(sizes, vec![5, 3, 2]);
    }

    #[test]
    fn json_roundtrip() {
        let mut net = CoSharingNetwork::default();
        star(&mut net, "a", &["u1", "u2", "u3"]);
        star(&mut net, "b", &["v1", "v2"]);
        let p = louvain_partition(&net, 1.0, 0).unwrap();
        assert_eq!(Partition::from_json(&p.to_json(Some("h"))).unwrap(), p);
        let mut buf = Vec::new();
        p.write_summary_csv(&net, &mut buf, Some("h")).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# manifest: h\nid,users,tweets,top_outlets\n1,3,0,a\n"));
    }
}
