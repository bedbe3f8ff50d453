//! Interaction-data ingestion, catalog construction, leave-one-out splitting,
//! and deterministic synthetic datasets for tests.
//!
//! Input format: one JSON object per line with keys `user`, `item`,
//! `timestamp`, `title`, `brand`, `category`. Items without a non-empty title
//! are dropped; missing brand/category fall back to `"unknown"`. Users and
//! items with fewer than `min_interactions` occurrences are removed
//! iteratively until a fixpoint (k-core filtering).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MIN_INTERACTIONS: usize = 5;
/// Most recent items retained per user after filtering.
pub const DEFAULT_HISTORY_CAP: usize = 20;

/// One catalog item: opaque id plus ordered attribute pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    pub attributes: Vec<(String, String)>,
}

impl ItemRecord {
    pub fn new(
        item_id: impl Into<String>,
        title: impl Into<String>,
        brand: impl Into<String>,
        category: impl Into<String>,
    ) -> Self {
        Self {
            item_id: item_id.into(),
            attributes: vec![
                ("title".to_string(), title.into()),
                ("brand".to_string(), brand.into()),
                ("category".to_string(), category.into()),
            ],
        }
    }

    pub fn attribute(&self, name: &str) -> Option<&str> {
        self.attributes
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
    }

    pub fn title(&self) -> &str {
        self.attribute("title").unwrap_or("")
    }

    pub fn validate(&self) -> Result<()> {
        if self.title().is_empty() {
            return Err(Error::Data(format!(
                "item {} has a missing or empty title",
                self.item_id
            )));
        }
        Ok(())
    }
}

/// One user's temporally ordered interactions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionSequence {
    pub user_id: String,
    /// (item_id, timestamp seconds), non-decreasing timestamps.
    pub items: Vec<(String, i64)>,
}

impl InteractionSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn item_ids(&self) -> Vec<String> {
        self.items.iter().map(|(id, _)| id.clone()).collect()
    }
}

/// Per-user leave-one-out split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSplit {
    pub user_id: String,
    pub train: Vec<String>,
    pub val: String,
    pub test: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub users: Vec<UserSplit>,
    pub catalog: Vec<ItemRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub avg_sequence_length: f64,
    pub malformed_lines: usize,
}

#[derive(Debug, Clone)]
pub struct LoadOutcome {
    pub catalog: Vec<ItemRecord>,
    pub sequences: Vec<InteractionSequence>,
    pub stats: CorpusStats,
    /// Line-level parse warnings (line number + message).
    pub warnings: Vec<String>,
}

#[derive(Deserialize)]
struct RawReview {
    user: String,
    item: String,
    timestamp: i64,
    #[serde(default)]
    title: Option<String>,
    #[serde(default)]
    brand: Option<String>,
    #[serde(default)]
    category: Option<String>,
}

/// Load a JSON-lines review file, drop untitled items, apply iterative
/// k-core filtering at `min_interactions`, sort each user's history by
/// timestamp (stable on ties), and keep the most recent `history_cap` items.
pub fn load_reviews(
    path: impl AsRef<Path>,
    min_interactions: usize,
    history_cap: usize,
) -> Result<LoadOutcome> {
    let text = fs::read_to_string(path.as_ref())?;
    load_reviews_str(&text, min_interactions, history_cap)
}

pub fn load_reviews_str(
    text: &str,
    min_interactions: usize,
    history_cap: usize,
) -> Result<LoadOutcome> {
    let mut warnings = Vec::new();
    let mut records: Vec<(usize, RawReview)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RawReview>(line) {
            Ok(r) => records.push((i + 1, r)),
            Err(e) => warnings.push(format!("line {}: {}", i + 1, e)),
        }
    }

    // Catalog metadata: first occurrence carrying a non-empty title wins.
    let mut catalog: Vec<ItemRecord> = Vec::new();
    let mut item_index: HashMap<String, usize> = HashMap::new();
    for (_, r) in &records {
        if item_index.contains_key(&r.item) {
            continue;
        }
        let title = r.title.clone().unwrap_or_default();
        if title.is_empty() {
            continue; // maybe a later record carries the title
        }
        item_index.insert(r.item.clone(), catalog.len());
        catalog.push(ItemRecord::new(
            r.item.clone(),
            title,
            r.brand
                .clone()
                .filter(|s| !s.is_empty())
                .unwrap_or_else(|| "unknown".into()),
            r.category
                .clone()
                .filter(|s| !s.is_empty())
                .unwrap_or_else(|| "unknown".into()),
        ));
    }

    // Interactions referencing titled items only, in file order.
    struct Inter {
        user: String,
        item: String,
        ts: i64,
    }
    let mut inters: Vec<Inter> = records
        .iter()
        .filter(|(_, r)| item_index.contains_key(&r.item))
        .map(|(_, r)| Inter {
            user: r.user.clone(),
            item: r.item.clone(),
            ts: r.timestamp,
        })
        .collect();

    // Iterative k-core on users and items.
    loop {
        let keep: Vec<bool> = {
            let mut user_count: HashMap<&str, usize> = HashMap::new();
            let mut item_count: HashMap<&str, usize> = HashMap::new();
            for it in &inters {
                *user_count.entry(&it.user).or_default() += 1;
                *item_count.entry(&it.item).or_default() += 1;
            }
            inters
                .iter()
                .map(|it| {
                    user_count[it.user.as_str()] >= min_interactions
                        && item_count[it.item.as_str()] >= min_interactions
                })
                .collect()
        };
        if keep.iter().all(|&k| k) {
            break;
        }
        let mut idx = 0;
        inters.retain(|_| {
            let k = keep[idx];
            idx += 1;
            k
        });
    }

    if inters.is_empty() {
        return Err(Error::Data(
            "no users survived title and k-core filtering".to_string(),
        ));
    }

    // Group by user in file order, then sort each history by timestamp
    // (stable, so ties keep file order) and cap to the most recent items.
    let mut user_order: Vec<String> = Vec::new();
    let mut per_user: HashMap<String, Vec<(String, i64)>> = HashMap::new();
    for it in &inters {
        if !per_user.contains_key(&it.user) {
            user_order.push(it.user.clone());
        }
        per_user
            .entry(it.user.clone())
            .or_default()
            .push((it.item.clone(), it.ts));
    }
    let mut sequences = Vec::with_capacity(user_order.len());
    for user in user_order {
        let mut items = per_user.remove(&user).unwrap();
        items.sort_by_key(|(_, ts)| *ts);
        if items.len() > history_cap {
            items.drain(..items.len() - history_cap);
        }
        sequences.push(InteractionSequence {
            user_id: user,
            items,
        });
    }

    // Restrict the catalog to items that still appear, preserving order.
    let mut used: HashMap<&str, bool> = HashMap::new();
    for seq in &sequences {
        for (id, _) in &seq.items {
            used.insert(id, true);
        }
    }
    let catalog: Vec<ItemRecord> = catalog
        .into_iter()
        .filter(|rec| used.contains_key(rec.item_id.as_str()))
        .collect();

    let interactions: usize = sequences.iter().map(|s| s.len()).sum();
    let stats = CorpusStats {
        users: sequences.len(),
        items: catalog.len(),
        interactions,
        avg_sequence_length: interactions as f64 / sequences.len() as f64,
        malformed_lines: warnings.len(),
    };
    Ok(LoadOutcome {
        catalog,
        sequences,
        stats,
        warnings,
    })
}

/// Leave-one-out: the most recent item is the test target, the second most
/// recent is the validation target, the rest form the training history.
pub fn leave_one_out_split(
    sequences: &[InteractionSequence],
    catalog: Vec<ItemRecord>,
) -> Result<SplitDataset> {
    let too_short: Vec<&str> = sequences
        .iter()
        .filter(|s| s.len() < 3)
        .map(|s| s.user_id.as_str())
        .collect();
    if !too_short.is_empty() {
        return Err(Error::Data(format!(
            "sequences shorter than 3 cannot be split (users: {})",
            too_short.join(", ")
        )));
    }
    let users = sequences
        .iter()
        .map(|s| {
            let ids = s.item_ids();
            let n = ids.len();
            UserSplit {
                user_id: s.user_id.clone(),
                train: ids[..n - 2].to_vec(),
                val: ids[n - 2].clone(),
                test: ids[n - 1].clone(),
            }
        })
        .collect();
    Ok(SplitDataset { users, catalog })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthPattern {
    Cyclic,
    Markov,
}

impl std::str::FromStr for SynthPattern {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cyclic" => Ok(Self::Cyclic),
            "markov" => Ok(Self::Markov),
            other => Err(Error::Config(format!(
                "unknown synthetic pattern '{other}' (expected cyclic or markov)"
            ))),
        }
    }
}

/// Row-stochastic transition table over the three item states (index mod 3)
/// used by the markov pattern.
pub const MARKOV_TRANSITIONS: [[f64; 3]; 3] = [
    [0.7, 0.2, 0.1],
    [0.1, 0.7, 0.2],
    [0.2, 0.1, 0.7],
];

/// Deterministic synthetic dataset. Sequence lengths are uniform in [5, 15].
/// `cyclic` makes item(t+1) = (item(t) + 1) mod num_items; `markov` walks a
/// fixed 3-state chain over item index classes (mod 3).
pub fn synth_generate(
    num_items: usize,
    num_users: usize,
    pattern: SynthPattern,
    seed: u64,
) -> Result<(Vec<ItemRecord>, Vec<InteractionSequence>)> {
    if num_items < 12 {
        return Err(Error::Config(format!(
            "synthetic generation needs num_items >= 12, got {num_items}"
        )));
    }
    if num_users < 1 {
        return Err(Error::Config(
            "synthetic generation needs num_users >= 1".into(),
        ));
    }
    let catalog: Vec<ItemRecord> = (0..num_items)
        .map(|k| {
            ItemRecord::new(
                format!("item-{k}"),
                format!("item-{k}"),
                format!("brand-{k}"),
                format!("category-{k}"),
            )
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sequences = Vec::with_capacity(num_users);
    for u in 0..num_users {
        let len = rng.random_range(5..=15usize);
        let mut indices = Vec::with_capacity(len);
        let mut current = rng.random_range(0..num_items);
        indices.push(current);
        for _ in 1..len {
            current = match pattern {
                SynthPattern::Cyclic => (current + 1) % num_items,
                SynthPattern::Markov => {
                    let state = current % 3;
                    let draw: f64 = rng.random_range(0.0..1.0);
                    let row = &MARKOV_TRANSITIONS[state];
                    let next_state = if draw < row[0] {
                        0
                    } else if draw < row[0] + row[1] {
                        1
                    } else {
                        2
                    };
                    // Uniform item within the chosen state class.
                    let count = (num_items + 2 - next_state) / 3;
                    let pick = rng.random_range(0..count);
                    next_state + 3 * pick
                }
            };
            indices.push(current);
        }
        let items = indices
            .iter()
            .enumerate()
            .map(|(t, &ix)| (format!("item-{ix}"), 1_000 + t as i64))
            .collect();
        sequences.push(InteractionSequence {
            user_id: format!("user-{u}"),
            items,
        });
    }
    Ok((catalog, sequences))
}

pub fn write_catalog(path: impl AsRef<Path>, catalog: &[ItemRecord]) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(catalog)?)?;
    Ok(())
}

pub fn read_catalog(path: impl AsRef<Path>) -> Result<Vec<ItemRecord>> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn write_split_manifest(path: impl AsRef<Path>, split: &SplitDataset) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(&split.users)?)?;
    Ok(())
}

pub fn read_split_manifest(
    path: impl AsRef<Path>,
    catalog: Vec<ItemRecord>,
) -> Result<SplitDataset> {
    let users: Vec<UserSplit> = serde_json::from_str(&fs::read_to_string(path)?)?;
    Ok(SplitDataset { users, catalog })
}
