//! Interaction logs, item and user metadata, temporal splits and the derived
//! statistics (popularity, groups) that the rest of the crate consumes.
//!
//! A [`Dataset`] is immutable once built. External ids are opaque strings;
//! everything downstream works with dense indices into `items` and `users`.

pub mod io;
pub mod split;
pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use io::{ItemMeta, UserMeta};
pub use split::{build_temporal_split, TemporalSplit};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackKind {
    Explicit,
    Implicit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub rating: Option<f64>,
    pub timestamp: i64,
    pub feedback_kind: FeedbackKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    pub title: String,
    pub description: String,
    pub description_tokens: Vec<usize>,
    /// Sorted, deduplicated category ids.
    pub categories: Vec<usize>,
    pub numeric_features: Vec<f64>,
    /// Number of training interactions.
    pub popularity_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    /// Item indices of all the user's interactions, ascending by time.
    pub history: Vec<usize>,
    pub group_label: usize,
    pub profile_features: Vec<f64>,
}

/// Dense view of one interaction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub user: usize,
    pub item: usize,
    pub rating: Option<f64>,
    pub timestamp: i64,
}

/// Lowercased whitespace tokens. Id 0 is reserved for unknown tokens; known
/// tokens are numbered from 1 in lexicographic order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        Vocabulary::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

pub const UNKNOWN_TOKEN: usize = 0;

impl Vocabulary {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<String> = texts.into_iter().flat_map(tokenize).collect();
        Self::from_tokens(set.into_iter().collect())
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let lookup = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i + 1))
            .collect();
        Vocabulary { tokens, lookup }
    }

    /// Number of ids, including the unknown id.
    pub fn size(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text)
            .map(|t| self.lookup.get(&t).copied().unwrap_or(UNKNOWN_TOKEN))
            .collect()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        id.checked_sub(1)
            .and_then(|i| self.tokens.get(i))
            .map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(|t| t.to_lowercase())
}

/// FNV-1a 64-bit hash of the user id modulo `n_groups`. Used when a dataset
/// carries no demographic labels.
pub fn hashed_group(user_id: &str, n_groups: usize) -> usize {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in user_id.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    (h % n_groups.max(1) as u64) as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopularityTable {
    pub counts: BTreeMap<String, usize>,
    pub total: usize,
}

impl PopularityTable {
    pub fn frequency(&self, item_id: &str) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.counts.get(item_id).copied().unwrap_or(0) as f64 / self.total as f64
    }

    pub fn frequencies(&self) -> BTreeMap<String, f64> {
        self.counts
            .iter()
            .map(|(k, &c)| (k.clone(), c as f64 / self.total as f64))
            .collect()
    }
}

pub fn popularity_table(interactions: &[Interaction]) -> PopularityTable {
    let mut counts = BTreeMap::new();
    for it in interactions {
        *counts.entry(it.item_id.clone()).or_insert(0) += 1;
    }
    PopularityTable {
        counts,
        total: interactions.len(),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetOptions {
    pub train_fraction: f64,
    /// Number of hashed groups when users carry no group label.
    pub n_groups: usize,
    /// Reuse an existing vocabulary instead of building one from training items.
    #[serde(skip)]
    pub vocabulary: Option<Vocabulary>,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            train_fraction: 0.8,
            n_groups: 2,
            vocabulary: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub interactions: Vec<Interaction>,
    pub events: Vec<Event>,
    pub items: Vec<ItemRecord>,
    pub users: Vec<UserRecord>,
    pub categories: Vec<String>,
    pub groups: Vec<String>,
    pub vocab: Vocabulary,
    pub split: TemporalSplit,
    pub numeric_dim: usize,
    item_index: HashMap<String, usize>,
    user_index: HashMap<String, usize>,
    /// Per user: event indices in time order within each split part.
    user_train: Vec<Vec<usize>>,
    user_validation: Vec<Vec<usize>>,
    user_test: Vec<Option<usize>>,
    /// Declared group labels came from user metadata rather than hashing.
    groups_from_metadata: bool,
}

impl Dataset {
    pub fn load(dir: &Path, options: DatasetOptions) -> Result<Dataset> {
        let interactions = io::parse_interactions(&dir.join("interactions.tsv"))?;
        let items_path = dir.join("items.jsonl");
        let items = if items_path.exists() {
            io::read_jsonl(&items_path)?
        } else {
            Vec::new()
        };
        let users_path = dir.join("users.jsonl");
        let users = if users_path.exists() {
            Some(io::read_jsonl(&users_path)?)
        } else {
            None
        };
        Dataset::from_parts(interactions, items, users, options)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        io::write_interactions(&dir.join("interactions.tsv"), &self.interactions)?;
        io::write_jsonl(&dir.join("items.jsonl"), &self.item_meta())?;
        io::write_jsonl(&dir.join("users.jsonl"), &self.user_meta())?;
        Ok(())
    }

    pub fn item_meta(&self) -> Vec<ItemMeta> {
        self.items
            .iter()
            .map(|it| ItemMeta {
                item_id: it.item_id.clone(),
                title: it.title.clone(),
                description: it.description.clone(),
                categories: it.categories.iter().map(|&c| self.categories[c].clone()).collect(),
                numeric: it.numeric_features.clone(),
            })
            .collect()
    }

    pub fn user_meta(&self) -> Vec<UserMeta> {
        self.users
            .iter()
            .map(|u| UserMeta {
                user_id: u.user_id.clone(),
                group: self.groups[u.group_label].clone(),
                profile: u.profile_features.clone(),
            })
            .collect()
    }

    pub fn from_parts(
        interactions: Vec<Interaction>,
        item_meta: Vec<ItemMeta>,
        user_meta: Option<Vec<UserMeta>>,
        options: DatasetOptions,
    ) -> Result<Dataset> {
        for it in &interactions {
            if it.timestamp < 0 {
                return Err(Error::data(format!("negative timestamp for {}", it.user_id)));
            }
            if it.rating.is_some() != (it.feedback_kind == FeedbackKind::Explicit) {
                return Err(Error::data("rating must be present exactly for explicit feedback"));
            }
        }

        // Items: metadata order first, then ids only seen in the log.
        let numeric_dim = item_meta.first().map(|m| m.numeric.len()).unwrap_or(0);
        let mut item_index = HashMap::new();
        let mut metas: Vec<ItemMeta> = Vec::new();
        for m in item_meta {
            if m.numeric.len() != numeric_dim {
                return Err(Error::data(format!(
                    "item {} has {} numeric features, expected {numeric_dim}",
                    m.item_id,
                    m.numeric.len()
                )));
            }
            if item_index.insert(m.item_id.clone(), metas.len()).is_some() {
                return Err(Error::data(format!("duplicate item metadata for {}", m.item_id)));
            }
            metas.push(m);
        }
        let mut bare = 0usize;
        for it in &interactions {
            if !item_index.contains_key(&it.item_id) {
                item_index.insert(it.item_id.clone(), metas.len());
                metas.push(ItemMeta {
                    item_id: it.item_id.clone(),
                    title: it.item_id.clone(),
                    description: String::new(),
                    categories: Vec::new(),
                    numeric: vec![0.0; numeric_dim],
                });
                bare += 1;
            }
        }
        if bare > 0 {
            log::warn!("{bare} items have no metadata; using bare records");
        }

        let categories: Vec<String> = metas
            .iter()
            .flat_map(|m| m.categories.iter().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let cat_index: HashMap<&str, usize> = categories
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();

        // Users: metadata order first, then first appearance in the log.
        let mut user_index: HashMap<String, usize> = HashMap::new();
        let mut user_ids: Vec<String> = Vec::new();
        let groups_from_metadata = user_meta.is_some();
        let mut meta_by_user: HashMap<String, UserMeta> = HashMap::new();
        if let Some(um) = user_meta {
            for u in um {
                if user_index.contains_key(&u.user_id) {
                    return Err(Error::data(format!("duplicate user metadata for {}", u.user_id)));
                }
                user_index.insert(u.user_id.clone(), user_ids.len());
                user_ids.push(u.user_id.clone());
                meta_by_user.insert(u.user_id.clone(), u);
            }
        }
        for it in &interactions {
            if !user_index.contains_key(&it.user_id) {
                user_index.insert(it.user_id.clone(), user_ids.len());
                user_ids.push(it.user_id.clone());
            }
        }

        let groups: Vec<String> = if groups_from_metadata {
            meta_by_user
                .values()
                .map(|m| m.group.clone())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect()
        } else {
            (0..options.n_groups.max(1)).map(|g| format!("g{g}")).collect()
        };
        let group_lookup: HashMap<&str, usize> =
            groups.iter().enumerate().map(|(i, g)| (g.as_str(), i)).collect();

        let events: Vec<Event> = interactions
            .iter()
            .map(|it| Event {
                user: user_index[&it.user_id],
                item: item_index[&it.item_id],
                rating: it.rating,
                timestamp: it.timestamp,
            })
            .collect();

        let split = build_temporal_split(&interactions, options.train_fraction)?;
        let n_users = user_ids.len();
        let mut user_train = vec![Vec::new(); n_users];
        let mut user_validation = vec![Vec::new(); n_users];
        let mut user_test = vec![None; n_users];
        for &i in &split.train {
            user_train[events[i].user].push(i);
        }
        for &i in &split.validation {
            user_validation[events[i].user].push(i);
        }
        for &i in &split.test {
            user_test[events[i].user] = Some(i);
        }
        let by_time = |v: &mut Vec<usize>| v.sort_by_key(|&i| (events[i].timestamp, i));
        user_train.iter_mut().for_each(by_time);
        user_validation.iter_mut().for_each(by_time);

        let vocab = match options.vocabulary {
            Some(v) => v,
            None => {
                let mut in_train = vec![false; metas.len()];
                for &i in &split.train {
                    in_train[events[i].item] = true;
                }
                Vocabulary::build(
                    metas
                        .iter()
                        .zip(&in_train)
                        .filter(|(_, &t)| t)
                        .map(|(m, _)| m.description.as_str()),
                )
            }
        };

        let mut popularity = vec![0usize; metas.len()];
        for &i in &split.train {
            popularity[events[i].item] += 1;
        }

        let items: Vec<ItemRecord> = metas
            .into_iter()
            .zip(popularity)
            .map(|(m, pop)| {
                let cats: BTreeSet<usize> = m.categories.iter().map(|c| cat_index[c.as_str()]).collect();
                ItemRecord {
                    description_tokens: vocab.encode(&m.description),
                    item_id: m.item_id,
                    title: m.title,
                    description: m.description,
                    categories: cats.into_iter().collect(),
                    numeric_features: m.numeric,
                    popularity_count: pop,
                }
            })
            .collect();

        let mut all_by_user: Vec<Vec<usize>> = vec![Vec::new(); n_users];
        for (i, e) in events.iter().enumerate() {
            all_by_user[e.user].push(i);
        }
        let mut users = Vec::with_capacity(n_users);
        for (u, uid) in user_ids.iter().enumerate() {
            let mut idx = std::mem::take(&mut all_by_user[u]);
            idx.sort_by_key(|&i| (events[i].timestamp, i));
            let history: Vec<usize> = idx.iter().map(|&i| events[i].item).collect();
            let (group_label, profile_features) = match meta_by_user.get(uid) {
                Some(m) => (group_lookup[m.group.as_str()], m.profile.clone()),
                None => {
                    let n = idx.len() as f64;
                    let explicit = idx.iter().filter(|&&i| events[i].rating.is_some()).count() as f64;
                    let frac = if n > 0.0 { explicit / n } else { 0.0 };
                    (
                        hashed_group(uid, groups.len()),
                        vec![(1.0 + n).ln(), frac],
                    )
                }
            };
            users.push(UserRecord {
                user_id: uid.clone(),
                history,
                group_label,
                profile_features,
            });
        }
        let profile_dim = users.first().map(|u| u.profile_features.len()).unwrap_or(0);
        if users.iter().any(|u| u.profile_features.len() != profile_dim) {
            return Err(Error::data("user profile features differ in dimension"));
        }

        Ok(Dataset {
            interactions,
            events,
            items,
            users,
            categories,
            groups,
            vocab,
            split,
            numeric_dim,
            item_index,
            user_index,
            user_train,
            user_validation,
            user_test,
            groups_from_metadata,
        })
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn profile_dim(&self) -> usize {
        self.users.first().map(|u| u.profile_features.len()).unwrap_or(0)
    }

    pub fn item_idx(&self, item_id: &str) -> Option<usize> {
        self.item_index.get(item_id).copied()
    }

    pub fn user_idx(&self, user_id: &str) -> Option<usize> {
        self.user_index.get(user_id).copied()
    }

    pub fn groups_from_metadata(&self) -> bool {
        self.groups_from_metadata
    }

    pub fn train_events(&self, user: usize) -> &[usize] {
        &self.user_train[user]
    }

    pub fn validation_events(&self, user: usize) -> &[usize] {
        &self.user_validation[user]
    }

    pub fn test_event(&self, user: usize) -> Option<usize> {
        self.user_test[user]
    }

    /// Training-split popularity counts per item index.
    pub fn item_popularity(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.popularity_count).collect()
    }

    pub fn train_interactions(&self) -> Vec<Interaction> {
        self.split.train.iter().map(|&i| self.interactions[i].clone()).collect()
    }

    /// Fingerprint of everything a trained model's shapes depend on.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for it in &self.items {
            h.update(it.item_id.as_bytes());
            h.update([0u8]);
        }
        h.update([1u8]);
        for t in self.vocab.tokens() {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        h.update([2u8]);
        for c in &self.categories {
            h.update(c.as_bytes());
            h.update([0u8]);
        }
        h.update(format!("{}:{}:{}", self.numeric_dim, self.profile_dim(), self.groups.len()).as_bytes());
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
