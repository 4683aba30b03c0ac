//! User ideology labels and community-level ideology mixes.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::community::Community;
use crate::ingest::{TweetRecord, TweetStore, UserId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Ideology {
    Liberal,
    Conservative,
    #[default]
    Unknown,
}

impl Ideology {
    pub fn as_str(self) -> &'static str {
        match self {
            Ideology::Liberal => "liberal",
            Ideology::Conservative => "conservative",
            Ideology::Unknown => "unknown",
        }
    }

    pub fn flipped(self) -> Ideology {
        match self {
            Ideology::Liberal => Ideology::Conservative,
            Ideology::Conservative => Ideology::Liberal,
            Ideology::Unknown => Ideology::Unknown,
        }
    }
}

impl std::str::FromStr for Ideology {
    type Err = IdeologyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "liberal" | "lib" | "0" => Ok(Ideology::Liberal),
            "conservative" | "con" | "1" => Ok(Ideology::Conservative),
            "unknown" | "" => Ok(Ideology::Unknown),
            other => Err(IdeologyError::BadLabel(other.to_string())),
        }
    }
}

/// Liberal share of a community's labeled tweets. The conservative share is
/// always `1 - r_lib`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdeologyMix {
    r_lib: f64,
}

impl IdeologyMix {
    pub fn new(r_lib: f64) -> Result<Self, IdeologyError> {
        if (0.0..=1.0).contains(&r_lib) {
            Ok(IdeologyMix { r_lib })
        } else {
            Err(IdeologyError::BadMix(r_lib))
        }
    }

    pub fn from_counts(lib: u64, con: u64) -> Option<Self> {
        let total = lib + con;
        (total > 0).then(|| IdeologyMix {
            r_lib: lib as f64 / total as f64,
        })
    }

    pub fn r_lib(&self) -> f64 {
        self.r_lib
    }

    pub fn r_con(&self) -> f64 {
        1.0 - self.r_lib
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IdeologyError {
    #[error("ideology mix r_lib={0} outside [0, 1]")]
    BadMix(f64),
    #[error("unrecognized ideology label {0:?}")]
    BadLabel(String),
    #[error("community {0} has no tweets from labeled users; exclude it from evaluation")]
    NoLabeledTweets(u32),
    #[error("labels file: {0}")]
    Csv(#[from] csv::Error),
    #[error("labels file: {0}")]
    Io(#[from] std::io::Error),
}

/// Assigns a binary ideology (or unknown) to one user from their tweets.
pub trait IdeologyLabeler: Sync {
    fn label(&self, user: &UserId, tweets: &[&TweetRecord]) -> Ideology;
}

/// Labels read verbatim from a `user_id,label` CSV.
#[derive(Debug, Clone, Default)]
pub struct FileLabeler {
    labels: HashMap<UserId, Ideology>,
}

impl FileLabeler {
    pub fn new(labels: HashMap<UserId, Ideology>) -> Self {
        FileLabeler { labels }
    }

    pub fn from_csv<R: Read>(reader: R) -> Result<Self, IdeologyError> {
        let mut labels = HashMap::new();
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
        for row in rdr.records() {
            let row = row?;
            let user = row.get(0).unwrap_or_default().trim();
            let label: Ideology = row.get(1).unwrap_or_default().parse()?;
            labels.insert(UserId(user.to_string()), label);
        }
        Ok(FileLabeler { labels })
    }

    pub fn from_path(path: &Path) -> Result<Self, IdeologyError> {
        Self::from_csv(std::fs::File::open(path)?)
    }
}

impl IdeologyLabeler for FileLabeler {
    fn label(&self, user: &UserId, _tweets: &[&TweetRecord]) -> Ideology {
        self.labels.get(user).copied().unwrap_or_default()
    }
}

/// Scores a user by the political lean of the outlets they link. Each shared
/// link to a listed outlet is one vote; the majority lean wins and a tie (or
/// no votes) is unknown.
#[derive(Debug, Clone, Default)]
pub struct LexiconLabeler {
    lean: HashMap<String, Ideology>,
}

const OUTLET_LEAN: &str = include_str!("../../../data/outlet_lean.csv");

impl LexiconLabeler {
    pub fn new(lean: HashMap<String, Ideology>) -> Self {
        LexiconLabeler { lean }
    }

    /// The bundled `domain,lean` seed list.
    pub fn bundled() -> Self {
        Self::from_csv(OUTLET_LEAN.as_bytes()).expect("bundled outlet lexicon parses")
    }

    pub fn from_csv<R: Read>(reader: R) -> Result<Self, IdeologyError> {
        let mut lean = HashMap::new();
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
        for row in rdr.records() {
            let row = row?;
            let domain = row.get(0).unwrap_or_default().trim().to_ascii_lowercase();
            let label: Ideology = row.get(1).unwrap_or_default().parse()?;
            lean.insert(domain, label);
        }
        Ok(LexiconLabeler { lean })
    }

    pub fn from_path(path: &Path) -> Result<Self, IdeologyError> {
        Self::from_csv(std::fs::File::open(path)?)
    }
}

impl IdeologyLabeler for LexiconLabeler {
    fn label(&self, _user: &UserId, tweets: &[&TweetRecord]) -> Ideology {
        let (mut lib, mut con) = (0u64, 0u64);
        for d in tweets.iter().flat_map(|t| t.domains.iter()) {
            match self.lean.get(d) {
                Some(Ideology::Liberal) => lib += 1,
                Some(Ideology::Conservative) => con += 1,
                _ => {}
            }
        }
        match lib.cmp(&con) {
            std::cmp::Ordering::Greater => Ideology::Liberal,
            std::cmp::Ordering::Less => Ideology::Conservative,
            std::cmp::Ordering::Equal => Ideology::Unknown,
        }
    }
}

/// Label every user in the store, in parallel. Returns the label counts.
pub fn label_users(store: &mut TweetStore, labeler: &dyn IdeologyLabeler) -> BTreeMap<Ideology, usize> {
    let by_user = store.tweets_by_user();
    let labels: Vec<(UserId, Ideology)> = store
        .users
        .keys()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&u| {
            let tweets: Vec<&TweetRecord> = by_user
                .get(u)
                .map(|ix| ix.iter().map(|&i| &store.records[i]).collect())
                .unwrap_or_default();
            (u.clone(), labeler.label(u, &tweets))
        })
        .collect();
    let mut counts = BTreeMap::new();
    for (u, l) in labels {
        *counts.entry(l).or_insert(0) += 1;
        if let Some(rec) = store.users.get_mut(&u) {
            rec.ideology = l;
        }
    }
    counts
}

/// Tweet-level liberal fraction for a community. Tweets by unknown users are
/// left out of both numerator and denominator.
pub fn ideology_fractions(community: &Community, store: &TweetStore) -> Result<IdeologyMix, IdeologyError> {
    let (mut lib, mut con) = (0u64, 0u64);
    for r in &store.records {
        if !community.users.contains(&r.user_id) {
            continue;
        }
        match store.ideology_of(&r.user_id) {
            Ideology::Liberal => lib += 1,
            Ideology::Conservative => con += 1,
            Ideology::Unknown => {}
        }
    }
    IdeologyMix::from_counts(lib, con).ok_or(IdeologyError::NoLabeledTweets(community.id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{TweetId, UserRecord};
    use chrono::TimeZone;
    use std::collections::BTreeSet;

    fn store_with(counts: &[(&str, Ideology, usize)]) -> TweetStore {
        let mut store = TweetStore::default();
        let mut n = 0;
        for (user, label, k) in counts {
            store.users.insert(
                UserId::from(*user),
                UserRecord {
                    user_id: UserId::from(*user),
                    follower_count: 200,
                    ideology: *label,
                },
            );
            for _ in 0..*k {
                n += 1;
                store.records.push(TweetRecord {
                    tweet_id: TweetId(n.to_string()),
                    user_id: UserId::from(*user),
                    text: "t".into(),
                    timestamp: Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap(),
                    is_retweet: false,
                    is_quote: false,
                    retweeted_user_id: None,
                    domains: vec![],
                });
            }
        }
        store
    }

    fn community_of(store: &TweetStore) -> Community {
        Community {
            id: 1,
            users: store.users.keys().cloned().collect(),
            outlets: BTreeSet::new(),
            tweet_count: store.len() as u64,
        }
    }

    use chrono::Utc;

    #[test]
    fn mostly_conservative() {
        let s = store_with(&[("c", Ideology::Conservative, 95), ("l", Ideology::Liberal, 5)]);
        let mix = ideology_fractions(&community_of(&s), &s).unwrap();
        assert!((mix.r_lib() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn all_liberal() {
        let s = store_with(&[("l", Ideology::Liberal, 7)]);
        assert_eq!(ideology_fractions(&community_of(&s), &s).unwrap().r_lib(), 1.0);
    }

    #[test]
    fn unknowns_excluded() {
        let s = store_with(&[
            ("l", Ideology::Liberal, 70),
            ("c", Ideology::Conservative, 30),
            ("u", Ideology::Unknown, 40),
        ]);
        let mix = ideology_fractions(&community_of(&s), &s).unwrap();
        assert!((mix.r_lib() - 0.7).abs() < 1e-15);
        assert!((mix.r_lib() + mix.r_con() - 1.0).abs() == 0.0);
    }

    #[test]
    fn no_labeled_tweets_is_error() {
        let s = store_with(&[("u", Ideology::Unknown, 3)]);
        assert!(matches!(
            ideology_fractions(&community_of(&s), &s),
            Err(IdeologyError::NoLabeledTweets(1))
        ));
    }

    #[test]
    fn scale_and_swap() {
        let s = store_with(&[("l", Ideology::Liberal, 3), ("c", Ideology::Conservative, 8)]);
        let d = store_with(&[("l", Ideology::Liberal, 6), ("c", Ideology::Conservative, 16)]);
        let a = ideology_fractions(&community_of(&s), &s).unwrap().r_lib();
        let b = ideology_fractions(&community_of(&d), &d).unwrap().r_lib();
        assert!((a - b).abs() < 1e-15);
        let mut sw = s.clone();
        for u in sw.users.values_mut() {
            u.ideology = u.ideology.flipped();
        }
        let c = ideology_fractions(&community_of(&sw), &sw).unwrap().r_lib();
        assert!((c - (1.0 - a)).abs() < 1e-15);
    }

    #[test]
    fn file_labeler_passthrough() {
        let csv = "user_id,label\nl,liberal\nc,conservative\n";
        let lab = FileLabeler::from_csv(csv.as_bytes()).unwrap();
        let mut s = store_with(&[
            ("l", Ideology::Unknown, 1),
            ("c", Ideology::Unknown, 1),
            ("x", Ideology::Unknown, 1),
        ]);
        let counts = label_users(&mut s, &lab);
        assert_eq!(s.ideology_of(&"l".into()), Ideology::Liberal);
        assert_eq!(s.ideology_of(&"c".into()), Ideology::Conservative);
        assert_eq!(s.ideology_of(&"x".into()), Ideology::Unknown);
        assert_eq!(counts[&Ideology::Unknown], 1);
    }

    #[test]
    fn lexicon_labeler() {
        let lab = LexiconLabeler::bundled();
        let mut s = store_with(&[
            ("a", Ideology::Unknown, 2),
            ("b", Ideology::Unknown, 2),
            ("c", Ideology::Unknown, 1),
        ]);
        s.records[0].domains = vec!["nytimes".into()];
        s.records[1].domains = vec!["washingtonpost".into(), "vox".into()];
        s.records[2].domains = vec!["nytimes".into()];
        s.records[3].domains = vec!["foxnews".into()];
        label_users(&mut s, &lab);
        assert_eq!(s.ideology_of(&"a".into()), Ideology::Liberal);
        // one vote each way
        assert_eq!(s.ideology_of(&"b".into()), Ideology::Unknown);
        // no signal
        assert_eq!(s.ideology_of(&"c".into()), Ideology::Unknown);
    }

    #[test]
    fn bad_label_rejected() {
        assert!(FileLabeler::from_csv("user_id,label\na,green\n".as_bytes()).is_err());
        assert!(IdeologyMix::new(1.5).is_err());
    }
}
