use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::Interaction;
use crate::error::{Error, Result};

/// Leave-last-out temporal split over interaction indices.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TemporalSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    /// Latest timestamp among training interactions.
    pub train_boundary: i64,
    /// Latest timestamp among training and validation interactions.
    pub eval_boundary: i64,
    /// Users with fewer than three interactions, left out of every set.
    pub dropped_users: usize,
}

/// Per user: the earliest `ceil(fraction * n)` interactions (at most `n - 1`)
/// go to train, the last one to test, anything in between to validation.
/// Users with fewer than three interactions are dropped.
pub fn build_temporal_split(interactions: &[Interaction], train_fraction: f64) -> Result<TemporalSplit> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let mut per_user: HashMap<&str, Vec<usize>> = HashMap::new();
    let mut user_order: Vec<&str> = Vec::new();
    for (i, it) in interactions.iter().enumerate() {
        per_user
            .entry(it.user_id.as_str())
            .or_insert_with(|| {
                user_order.push(it.user_id.as_str());
                Vec::new()
            })
            .push(i);
    }

    let mut split = TemporalSplit {
        train_boundary: i64::MIN,
        eval_boundary: i64::MIN,
        ..Default::default()
    };
    for user in user_order {
        let mut idx = per_user.remove(user).unwrap_or_default();
        let n = idx.len();
        if n < 3 {
            split.dropped_users += 1;
            continue;
        }
        idx.sort_by_key(|&i| (interactions[i].timestamp, i));
        let n_train = ((train_fraction * n as f64).ceil() as usize).clamp(1, n - 1);
        for (pos, &i) in idx.iter().enumerate() {
            let ts = interactions[i].timestamp;
            if pos < n_train {
                split.train.push(i);
                split.train_boundary = split.train_boundary.max(ts);
                split.eval_boundary = split.eval_boundary.max(ts);
            } else if pos == n - 1 {
                split.test.push(i);
            } else {
                split.validation.push(i);
                split.eval_boundary = split.eval_boundary.max(ts);
            }
        }
    }
    if split.dropped_users > 0 {
        log::info!(
            "temporal split dropped {} users with fewer than 3 interactions",
            split.dropped_users
        );
    }
    if split.train.is_empty() {
        split.train_boundary = 0;
        split.eval_boundary = 0;
    }
    Ok(split)
}
