//! Planted-preference synthetic data.
//!
//! Every user has one or more preferred categories and draws most of their
//! interactions from them; within a category, items follow a Zipf-like
//! popularity curve whose exponent may differ per user group (group-correlated
//! exposure). Item text, categories and numeric features all carry the
//! category signal so content encoders have something to learn from.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::{self, ItemMeta, UserMeta};
use super::{Dataset, DatasetOptions, FeedbackKind, Interaction};
use crate::error::Result;
use crate::numerics::Rng;

const GENRES: [&str; 20] = [
    "action", "adventure", "animation", "comedy", "crime", "documentary", "drama", "family",
    "fantasy", "history", "horror", "music", "mystery", "romance", "scifi", "sports", "thriller",
    "war", "western", "noir",
];

const FILLER: [&str; 12] = [
    "story", "about", "the", "a", "new", "classic", "journey", "world", "life", "night", "friends",
    "city",
];

const BASE_TIME: i64 = 1_600_000_000;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlantedConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_categories: usize,
    pub min_interactions: usize,
    pub max_interactions: usize,
    pub preferred_per_user: usize,
    /// Probability that an interaction comes from a preferred category.
    pub purity: f64,
    /// Zipf exponent of within-category item popularity.
    pub item_skew: f64,
    /// Per-group override of `item_skew`; empty means no group effect.
    pub group_skew: Vec<f64>,
    /// Per-group override of `purity`, indexed like `group_skew`.
    pub group_purity: Vec<f64>,
    pub n_groups: usize,
    pub explicit_fraction: f64,
    pub numeric_dim: usize,
    pub secondary_category_prob: f64,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            n_users: 200,
            n_items: 500,
            n_categories: 20,
            min_interactions: 15,
            max_interactions: 25,
            preferred_per_user: 1,
            purity: 0.9,
            item_skew: 0.8,
            group_skew: Vec::new(),
            group_purity: Vec::new(),
            n_groups: 2,
            explicit_fraction: 0.5,
            numeric_dim: 4,
            secondary_category_prob: 0.2,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub interactions: Vec<Interaction>,
    pub items: Vec<ItemMeta>,
    pub users: Vec<UserMeta>,
    /// Planted preferred categories per user (names).
    pub preferences: Vec<Vec<String>>,
}

impl SyntheticData {
    pub fn into_dataset(self, options: DatasetOptions) -> Result<Dataset> {
        Dataset::from_parts(self.interactions, self.items, Some(self.users), options)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        io::write_interactions(&dir.join("interactions.tsv"), &self.interactions)?;
        io::write_jsonl(&dir.join("items.jsonl"), &self.items)?;
        io::write_jsonl(&dir.join("users.jsonl"), &self.users)?;
        Ok(())
    }
}

pub fn category_name(c: usize) -> String {
    if c < GENRES.len() {
        GENRES[c].to_string()
    } else {
        format!("{}{}", GENRES[c % GENRES.len()], c / GENRES.len())
    }
}

fn build_items(cfg: &PlantedConfig, rng: &mut Rng) -> Vec<ItemMeta> {
    let c = cfg.n_categories.max(1);
    let centers: Vec<Vec<f64>> = (0..c)
        .map(|_| (0..cfg.numeric_dim).map(|_| rng.uniform(-1.0, 1.0)).collect())
        .collect();
    (0..cfg.n_items)
        .map(|i| {
            let cat = i % c;
            let name = category_name(cat);
            let mut cats = vec![name.clone()];
            if c > 1 && rng.bernoulli(cfg.secondary_category_prob) {
                let other = (cat + 1 + rng.index(c - 1)) % c;
                cats.push(category_name(other));
            }
            let mut words = vec![name.clone(), format!("{name}-themed")];
            for _ in 0..3 {
                words.push(FILLER[rng.index(FILLER.len())].to_string());
            }
            words.push(format!("{name}{}", rng.index(3)));
            let numeric = centers[cat]
                .iter()
                .map(|m| m + 0.3 * rng.normal())
                .collect();
            ItemMeta {
                item_id: format!("i{i}"),
                title: format!("{} {} {i}", capitalize(&name), FILLER[i % FILLER.len()]),
                description: words.join(" "),
                categories: cats,
                numeric,
            }
        })
        .collect()
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

/// Items grouped by primary category, most popular first.
fn category_members(cfg: &PlantedConfig) -> Vec<Vec<usize>> {
    let c = cfg.n_categories.max(1);
    let mut members = vec![Vec::new(); c];
    for i in 0..cfg.n_items {
        members[i % c].push(i);
    }
    members
}

struct UserDraw<'a> {
    members: &'a [Vec<usize>],
    allowed: &'a [usize],
}

impl UserDraw<'_> {
    fn sequence(&self, rng: &mut Rng, preferred: &[usize], skew: f64, purity: f64, n: usize) -> Vec<(usize, bool)> {
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(n);
        let mut guard = 0;
        while out.len() < n && guard < n * 50 {
            guard += 1;
            let from_pref = rng.bernoulli(purity);
            let cat = if from_pref {
                preferred[rng.index(preferred.len())]
            } else {
                self.allowed[rng.index(self.allowed.len())]
            };
            let pool = &self.members[cat];
            if pool.is_empty() {
                continue;
            }
            let weights: Vec<f64> = (0..pool.len())
                .map(|r| 1.0 / ((r + 1) as f64).powf(skew))
                .collect();
            let item = pool[rng.weighted_index(&weights)];
            if seen.insert(item) {
                out.push((item, preferred.contains(&cat)));
            }
        }
        out
    }
}

fn draw_users(
    cfg: &PlantedConfig,
    rng: &mut Rng,
    allowed: &[usize],
    time_offset: i64,
    preferences_out: &mut Vec<Vec<String>>,
) -> (Vec<Interaction>, Vec<UserMeta>) {
    let members = category_members(cfg);
    let draw = UserDraw {
        members: &members,
        allowed,
    };
    let mut interactions = Vec::new();
    let mut users = Vec::new();
    let n_groups = cfg.n_groups.max(1);
    for u in 0..cfg.n_users {
        let group = u % n_groups;
        let mut prefs = Vec::new();
        while prefs.len() < cfg.preferred_per_user.min(allowed.len()) {
            let c = allowed[rng.index(allowed.len())];
            if !prefs.contains(&c) {
                prefs.push(c);
            }
        }
        let skew = cfg.group_skew.get(group).copied().unwrap_or(cfg.item_skew);
        let purity = cfg.group_purity.get(group).copied().unwrap_or(cfg.purity);
        let span = cfg.max_interactions.saturating_sub(cfg.min_interactions) + 1;
        let n = cfg.min_interactions + rng.index(span);
        let seq = draw.sequence(rng, &prefs, skew, purity, n);
        let mut t = BASE_TIME + time_offset + rng.index(30 * 86_400) as i64;
        let uid = format!("u{u}");
        for (item, liked) in seq {
            t += 3_600 + rng.index(3 * 86_400) as i64;
            let rating = if rng.bernoulli(cfg.explicit_fraction) {
                Some(if liked {
                    4.0 + rng.index(2) as f64
                } else {
                    1.0 + rng.index(3) as f64
                })
            } else {
                None
            };
            interactions.push(Interaction {
                user_id: uid.clone(),
                item_id: format!("i{item}"),
                rating,
                timestamp: t,
                feedback_kind: if rating.is_some() {
                    FeedbackKind::Explicit
                } else {
                    FeedbackKind::Implicit
                },
            });
        }
        users.push(UserMeta {
            user_id: uid,
            group: format!("g{group}"),
            profile: vec![(1.0 + n as f64).ln(), group as f64 + 0.5 * rng.normal()],
        });
        preferences_out.push(prefs.iter().map(|&c| category_name(c)).collect());
    }
    (interactions, users)
}

pub fn planted(cfg: &PlantedConfig) -> SyntheticData {
    let rng = Rng::new(cfg.seed);
    let items = build_items(cfg, &mut rng.fork(1));
    let allowed: Vec<usize> = (0..cfg.n_categories.max(1)).collect();
    let mut preferences = Vec::new();
    let (interactions, users) = draw_users(cfg, &mut rng.fork(2), &allowed, 0, &mut preferences);
    SyntheticData {
        interactions,
        items,
        users,
        preferences,
    }
}

/// Two sequential tasks over one catalog: task A draws only from the first
/// half of the categories, task B only from the second half, with the same
/// users arriving later in time.
pub fn planted_two_task(cfg: &PlantedConfig) -> (SyntheticData, SyntheticData) {
    let rng = Rng::new(cfg.seed);
    let items = build_items(cfg, &mut rng.fork(1));
    let c = cfg.n_categories.max(2);
    let first: Vec<usize> = (0..c / 2).collect();
    let second: Vec<usize> = (c / 2..c).collect();
    let mut prefs_a = Vec::new();
    let mut prefs_b = Vec::new();
    let (ia, ua) = draw_users(cfg, &mut rng.fork(2), &first, 0, &mut prefs_a);
    let (ib, ub) = draw_users(cfg, &mut rng.fork(3), &second, 400 * 86_400, &mut prefs_b);
    (
        SyntheticData {
            interactions: ia,
            items: items.clone(),
            users: ua,
            preferences: prefs_a,
        },
        SyntheticData {
            interactions: ib,
            items,
            users: ub,
            preferences: prefs_b,
        },
    )
}
