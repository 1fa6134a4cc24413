//! Ranking and beyond-accuracy metrics, baseline rankers and report output.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::debias::{median, parity_gap};
use crate::error::{Error, Result};
use crate::numerics::{cosine, Rng};

/// One user's ranked recommendations over item indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub user_id: String,
    pub items: Vec<usize>,
    pub scores: Vec<f64>,
}

impl RankedList {
    /// Validates: equal lengths, no duplicates, nonincreasing scores.
    pub fn new(user_id: impl Into<String>, items: Vec<usize>, scores: Vec<f64>) -> Result<Self> {
        if items.len() != scores.len() {
            return Err(Error::shape("items and scores differ in length"));
        }
        let distinct: BTreeSet<usize> = items.iter().copied().collect();
        if distinct.len() != items.len() {
            return Err(Error::invalid("ranked list contains duplicate items"));
        }
        if scores.windows(2).any(|w| !(w[0] >= w[1])) {
            return Err(Error::invalid("scores must be nonincreasing"));
        }
        Ok(RankedList {
            user_id: user_id.into(),
            items,
            scores,
        })
    }

    /// Orders `(item, score)` pairs by score descending, then item ascending.
    pub fn from_scored(user_id: impl Into<String>, mut scored: Vec<(usize, f64)>) -> Result<Self> {
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let (items, scores) = scored.into_iter().unzip();
        RankedList::new(user_id, items, scores)
    }

    /// 1-based rank of `item`, if present.
    pub fn rank_of(&self, item: usize) -> Option<usize> {
        self.items.iter().position(|&i| i == item).map(|p| p + 1)
    }
}

/// A metric averaged over the users that had ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Averaged {
    pub value: f64,
    pub users: usize,
    pub skipped: usize,
}

fn average_over_truth<F>(lists: &[RankedList], truth: &BTreeMap<String, usize>, per_user: F) -> Result<Averaged>
where
    F: Fn(&RankedList, usize) -> f64,
{
    let mut sum = 0.0;
    let mut users = 0;
    let mut skipped = 0;
    for list in lists {
        match truth.get(&list.user_id) {
            Some(&target) => {
                sum += per_user(list, target);
                users += 1;
            }
            None => skipped += 1,
        }
    }
    if users == 0 {
        return Err(Error::invalid("no user has ground truth"));
    }
    Ok(Averaged {
        value: sum / users as f64,
        users,
        skipped,
    })
}

pub fn hr_at_k(lists: &[RankedList], truth: &BTreeMap<String, usize>, k: usize) -> Result<Averaged> {
    average_over_truth(lists, truth, |l, t| match l.rank_of(t) {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    })
}

/// Binary-relevance NDCG with a single relevant item, so IDCG = 1.
pub fn ndcg_at_k(lists: &[RankedList], truth: &BTreeMap<String, usize>, k: usize) -> Result<Averaged> {
    average_over_truth(lists, truth, |l, t| match l.rank_of(t) {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    })
}

pub fn mrr(lists: &[RankedList], truth: &BTreeMap<String, usize>) -> Result<Averaged> {
    average_over_truth(lists, truth, |l, t| l.rank_of(t).map_or(0.0, |r| 1.0 / r as f64))
}

/// Mean pairwise `1 − cos` over the list; lists shorter than two give 0.
pub fn intra_list_diversity(items: &[usize], embeddings: &[Vec<f64>]) -> Result<f64> {
    if items.len() < 2 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for a in 0..items.len() {
        for b in a + 1..items.len() {
            let (ea, eb) = (lookup(embeddings, items[a])?, lookup(embeddings, items[b])?);
            sum += 1.0 - cosine(ea, eb)?;
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

fn lookup(embeddings: &[Vec<f64>], i: usize) -> Result<&[f64]> {
    embeddings
        .get(i)
        .map(|v| v.as_slice())
        .ok_or_else(|| Error::invalid(format!("no embedding for item {i}")))
}

pub fn mean_intra_list_diversity(lists: &[RankedList], k: usize, embeddings: &[Vec<f64>]) -> Result<f64> {
    if lists.is_empty() {
        return Err(Error::invalid("no lists"));
    }
    let mut sum = 0.0;
    for l in lists {
        sum += intra_list_diversity(&l.items[..k.min(l.items.len())], embeddings)?;
    }
    Ok(sum / lists.len() as f64)
}

/// Distinct items across all lists truncated at 100, over the catalog size.
pub fn coverage_at_100(lists: &[RankedList], catalog: usize) -> Result<f64> {
    if catalog == 0 {
        return Err(Error::invalid("empty catalog"));
    }
    let seen: BTreeSet<usize> = lists.iter().flat_map(|l| l.items.iter().take(100).copied()).collect();
    Ok(seen.len() as f64 / catalog as f64)
}

/// Self-information of one item, `−log2 f / log2 |catalog|`, clamped to
/// `[0, 1]`; never-seen items count as maximally novel.
pub fn item_novelty(count: usize, total: usize, catalog: usize) -> f64 {
    if catalog < 2 {
        return 0.0;
    }
    if count == 0 || total == 0 {
        return 1.0;
    }
    let f = count as f64 / total as f64;
    (-f.log2() / (catalog as f64).log2()).clamp(0.0, 1.0)
}

/// Mean item novelty over every recommended slot in the first `k` positions.
pub fn novelty(lists: &[RankedList], k: usize, popularity: &[usize]) -> Result<f64> {
    let total: usize = popularity.iter().sum();
    let catalog = popularity.len();
    let mut sum = 0.0;
    let mut n = 0usize;
    for l in lists {
        for &i in l.items.iter().take(k) {
            let c = *popularity.get(i).ok_or_else(|| Error::invalid(format!("no popularity for item {i}")))?;
            sum += item_novelty(c, total, catalog);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("no recommended items"));
    }
    Ok(sum / n as f64)
}

/// List scores pooled per group; users without a group are ignored.
pub fn group_scores(lists: &[RankedList], k: usize, groups: &BTreeMap<String, usize>, n_groups: usize) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new(); n_groups];
    for l in lists {
        if let Some(&g) = groups.get(&l.user_id) {
            if g < n_groups {
                out[g].extend(l.scores.iter().take(k));
            }
        }
    }
    out
}

/// `1 − parity_gap` of above-`tau` rates of list scores across groups;
/// `tau = None` uses the pooled median.
pub fn fairness_score(
    lists: &[RankedList],
    k: usize,
    groups: &BTreeMap<String, usize>,
    n_groups: usize,
    tau: Option<f64>,
) -> Result<f64> {
    let by_group = group_scores(lists, k, groups, n_groups);
    let tau = match tau {
        Some(t) => t,
        None => {
            let all: Vec<f64> = by_group.iter().flatten().copied().collect();
            median(&all).ok_or_else(|| Error::invalid("no scores"))?
        }
    };
    Ok(1.0 - parity_gap(&by_group, tau)?)
}

/// Items ordered by training popularity, ties by ascending index.
pub fn popularity_ranking(user_id: &str, counts: &[usize], exclude: &[usize], n: usize) -> Result<RankedList> {
    let excluded: BTreeSet<usize> = exclude.iter().copied().collect();
    let total = counts.iter().sum::<usize>().max(1) as f64;
    let scored: Vec<(usize, f64)> = counts
        .iter()
        .enumerate()
        .filter(|(i, _)| !excluded.contains(i))
        .map(|(i, &c)| (i, c as f64 / total))
        .collect();
    let mut list = RankedList::from_scored(user_id, scored)?;
    list.items.truncate(n);
    list.scores.truncate(n);
    Ok(list)
}

/// Uniformly random ordering of the non-excluded catalog.
pub fn random_ranking(user_id: &str, catalog: usize, exclude: &[usize], n: usize, rng: &mut Rng) -> Result<RankedList> {
    let excluded: BTreeSet<usize> = exclude.iter().copied().collect();
    let scored: Vec<(usize, f64)> = (0..catalog).filter(|i| !excluded.contains(i)).map(|i| (i, rng.unit())).collect();
    let mut list = RankedList::from_scored(user_id, scored)?;
    list.items.truncate(n);
    list.scores.truncate(n);
    Ok(list)
}

/// Inputs shared by every metric in a report.
pub struct MetricInputs<'a> {
    pub truth: &'a BTreeMap<String, usize>,
    pub cutoffs: &'a [usize],
    pub embeddings: &'a [Vec<f64>],
    pub popularity: &'a [usize],
    pub groups: &'a BTreeMap<String, usize>,
    pub n_groups: usize,
    pub fairness_tau: Option<f64>,
}

/// Cutoff used for ILD, novelty and fairness.
pub const LIST_CUTOFF: usize = 10;

pub fn compute_metrics(lists: &[RankedList], inputs: &MetricInputs) -> Result<BTreeMap<String, f64>> {
    let mut m = BTreeMap::new();
    for &k in inputs.cutoffs {
        m.insert(format!("hr@{k}"), hr_at_k(lists, inputs.truth, k)?.value);
        m.insert(format!("ndcg@{k}"), ndcg_at_k(lists, inputs.truth, k)?.value);
    }
    m.insert("mrr".into(), mrr(lists, inputs.truth)?.value);
    m.insert(
        "ild".into(),
        mean_intra_list_diversity(lists, LIST_CUTOFF, inputs.embeddings)?,
    );
    m.insert("coverage@100".into(), coverage_at_100(lists, inputs.popularity.len())?);
    m.insert("novelty".into(), novelty(lists, LIST_CUTOFF, inputs.popularity)?);
    if inputs.n_groups >= 2 {
        m.insert(
            "fairness".into(),
            fairness_score(lists, LIST_CUTOFF, inputs.groups, inputs.n_groups, inputs.fairness_tau)?,
        );
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub metrics: BTreeMap<String, f64>,
    pub cutoffs: Vec<usize>,
    pub dataset_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub users: usize,
    pub skipped: usize,
}

/// Several systems evaluated on the same split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub rows: Vec<EvalReport>,
}

impl ReportTable {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn row(&self, system: &str) -> Option<&EvalReport> {
        self.rows.iter().find(|r| r.system == system)
    }

    /// Aligned text table, one row per system, metric columns in a fixed
    /// order followed by any extra metrics alphabetically.
    pub fn to_text(&self) -> String {
        let mut columns: Vec<String> = Vec::new();
        if let Some(first) = self.rows.first() {
            for &k in &first.cutoffs {
                columns.push(format!("hr@{k}"));
            }
            for &k in &first.cutoffs {
                columns.push(format!("ndcg@{k}"));
            }
            for c in ["mrr", "ild", "coverage@100", "novelty", "fairness"] {
                columns.push(c.into());
            }
        }
        for r in &self.rows {
            for k in r.metrics.keys() {
                if !columns.contains(k) {
                    columns.push(k.clone());
                }
            }
        }
        columns.retain(|c| self.rows.iter().any(|r| r.metrics.contains_key(c)));
        let name_w = self.rows.iter().map(|r| r.system.len()).max().unwrap_or(0).max(6);
        let mut out = String::new();
        let _ = write!(out, "{:<name_w$}", "system");
        for c in &columns {
            let _ = write!(out, "  {:>12}", c);
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:<name_w$}", r.system);
            for c in &columns {
                match r.metrics.get(c) {
                    Some(v) => {
                        let _ = write!(out, "  {:>12.4}", v);
                    }
                    None => {
                        let _ = write!(out, "  {:>12}", "-");
                    }
                }
            }
            out.push('\n');
        }
        if let Some(first) = self.rows.first() {
            let _ = writeln!(
                out,
                "dataset {}  config {}  seed {}  users {}",
                first.dataset_id, first.config_hash, first.seed, first.users
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::debias::parity_gap;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn list(user: &str, items: &[usize]) -> RankedList {
        let scores = (0..items.len()).map(|r| 1.0 / (r + 1) as f64).collect();
        RankedList::new(user, items.to_vec(), scores).unwrap()
    }

    fn truth(pairs: &[(&str, usize)]) -> BTreeMap<String, usize> {
        pairs.iter().map(|(u, i)| (u.to_string(), *i)).collect()
    }

    #[test]
    fn list_validation() {
        assert!(RankedList::new("u", vec![1, 1], vec![0.5, 0.4]).is_err());
        assert!(RankedList::new("u", vec![1, 2], vec![0.4, 0.5]).is_err());
        assert!(RankedList::new("u", vec![1], vec![0.4, 0.5]).is_err());
        let l = RankedList::from_scored("u", vec![(3, 0.1), (1, 0.5), (0, 0.5)]).unwrap();
        assert_eq!(l.items, vec![0, 1, 3]);
    }

    #[test]
    fn rank_cases() {
        let t = truth(&[("a", 7)]);
        let first = [list("a", &[7, 1, 2])];
        assert_eq!(hr_at_k(&first, &t, 1).unwrap().value, 1.0);
        assert_eq!(ndcg_at_k(&first, &t, 1).unwrap().value, 1.0);
        let second = [list("a", &[1, 7, 2])];
        let n = ndcg_at_k(&second, &t, 10).unwrap().value;
        assert!((n - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((n - 0.63093).abs() < 1e-5);
        let past = [list("a", &[1, 2, 3, 7])];
        assert_eq!(hr_at_k(&past, &t, 3).unwrap().value, 0.0);
        assert_eq!(mrr(&past, &t).unwrap().value, 0.25);
        assert_eq!(mrr(&[list("a", &[1, 2])], &t).unwrap().value, 0.0);
    }

    #[test]
    fn users_without_truth_are_counted() {
        let t = truth(&[("a", 1)]);
        let r = hr_at_k(&[list("a", &[1]), list("b", &[1])], &t, 5).unwrap();
        assert_eq!((r.users, r.skipped, r.value), (1, 1, 1.0));
        assert!(hr_at_k(&[list("b", &[1])], &t, 5).is_err());
    }

    #[test]
    fn diversity_cases() {
        let same = vec![vec![1.0, 2.0]; 3];
        assert!(intra_list_diversity(&[0, 1, 2], &same).unwrap().abs() < 1e-15);
        let orth = vec![vec![1.0, 0.0], vec![0.0, 3.0]];
        assert!((intra_list_diversity(&[0, 1], &orth).unwrap() - 1.0).abs() < 1e-15);
        assert!(intra_list_diversity(&[0, 5], &orth).is_err());
    }

    #[test]
    fn coverage_cases() {
        let lists = [list("a", &[0, 1]), list("b", &[0, 1])];
        assert_eq!(coverage_at_100(&lists, 10).unwrap(), 0.2);
        let all = [list("a", &[0, 1]), list("b", &[2])];
        assert_eq!(coverage_at_100(&all, 3).unwrap(), 1.0);
    }

    #[test]
    fn novelty_cases() {
        assert_eq!(novelty(&[list("a", &[0])], 10, &[5]).unwrap(), 0.0);
        // Counts 6, 1, 1 over 8: item 1 has −log2(1/8)/log2(3), clamped to 1.
        let pop = [6, 1, 1];
        let hand = (-(6.0f64 / 8.0).log2() / 3f64.log2() + 1.0) / 2.0;
        assert!((novelty(&[list("a", &[0, 1])], 10, &pop).unwrap() - hand).abs() < 1e-15);
    }

    #[test]
    fn popular_recommender_is_less_novel_than_random() {
        let mut rng = Rng::new(1);
        let pop: Vec<usize> = (0..50).map(|i| 1 + 1000 / (i + 1)).collect();
        let popular: Vec<RankedList> = (0..30).map(|u| popularity_ranking(&format!("u{u}"), &pop, &[], 10).unwrap()).collect();
        let random: Vec<RankedList> = (0..30)
            .map(|u| random_ranking(&format!("u{u}"), 50, &[], 10, &mut rng).unwrap())
            .collect();
        assert!(novelty(&popular, 10, &pop).unwrap() < novelty(&random, 10, &pop).unwrap());
    }

    #[test]
    fn fairness_cases() {
        let groups: BTreeMap<String, usize> = [("a", 0), ("b", 1)].iter().map(|(u, g)| (u.to_string(), *g)).collect();
        let eq = [
            RankedList::new("a", vec![0, 1], vec![0.9, 0.1]).unwrap(),
            RankedList::new("b", vec![0, 1], vec![0.9, 0.1]).unwrap(),
        ];
        assert_eq!(fairness_score(&eq, 10, &groups, 2, Some(0.5)).unwrap(), 1.0);
        let skew = [
            RankedList::new("a", vec![0, 1], vec![0.9, 0.8]).unwrap(),
            RankedList::new("b", vec![0, 1], vec![0.2, 0.1]).unwrap(),
        ];
        assert_eq!(fairness_score(&skew, 10, &groups, 2, Some(0.5)).unwrap(), 0.0);
    }

    #[test]
    fn fairness_matches_parity_gap_on_three_groups() {
        let mut rng = Rng::new(4);
        let mut groups = BTreeMap::new();
        let mut lists = Vec::new();
        let mut by_group = vec![Vec::new(); 3];
        for u in 0..12 {
            let id = format!("u{u}");
            groups.insert(id.clone(), u % 3);
            let mut s: Vec<f64> = (0..4).map(|_| rng.unit()).collect();
            s.sort_by(|a, b| b.total_cmp(a));
            by_group[u % 3].extend(&s);
            lists.push(RankedList::new(id, vec![0, 1, 2, 3], s).unwrap());
        }
        let f = fairness_score(&lists, 10, &groups, 3, Some(0.4)).unwrap();
        assert_eq!(f, 1.0 - parity_gap(&by_group, 0.4).unwrap());
    }

    #[test]
    fn baseline_rankers_skip_excluded() {
        let l = popularity_ranking("u", &[3, 9, 1, 9], &[1], 2).unwrap();
        assert_eq!(l.items, vec![3, 0]);
        let r = random_ranking("u", 5, &[0, 4], 10, &mut Rng::new(2)).unwrap();
        let mut items = r.items.clone();
        items.sort();
        assert_eq!(items, vec![1, 2, 3]);
    }

    #[test]
    fn report_serializes_and_renders() {
        let mut metrics = BTreeMap::new();
        metrics.insert("hr@10".to_string(), 0.5);
        metrics.insert("mrr".to_string(), 0.25);
        let row = EvalReport {
            system: "model".into(),
            metrics,
            cutoffs: vec![10],
            dataset_id: "d".into(),
            config_hash: "h".into(),
            seed: 3,
            users: 2,
            skipped: 0,
        };
        let t = ReportTable { rows: vec![row] };
        assert_eq!(ReportTable::from_json(&t.to_json().unwrap()).unwrap(), t);
        let text = t.to_text();
        assert!(text.contains("hr@10") && text.contains("0.5000") && text.contains("seed 3"));
    }

    fn instance(seed: u64) -> (Vec<RankedList>, BTreeMap<String, usize>, usize) {
        let mut rng = Rng::new(seed);
        let catalog = 8 + rng.index(10);
        let users = 1 + rng.index(6);
        let mut lists = Vec::new();
        let mut t = BTreeMap::new();
        for u in 0..users {
            let mut items: Vec<usize> = (0..catalog).collect();
            rng.shuffle(&mut items);
            items.truncate(1 + rng.index(catalog));
            let scores: Vec<f64> = (0..items.len()).map(|r| -(r as f64)).collect();
            t.insert(format!("u{u}"), rng.index(catalog));
            lists.push(RankedList::new(format!("u{u}"), items, scores).unwrap());
        }
        (lists, t, catalog)
    }

    proptest! {
        #[test]
        fn cutoff_monotonicity(seed in 0u64..500, k in 1usize..6, extra in 0usize..6) {
            let (lists, t, _) = instance(seed);
            let small = hr_at_k(&lists, &t, k).unwrap().value;
            let big = hr_at_k(&lists, &t, k + extra).unwrap().value;
            prop_assert!(big >= small);
            prop_assert!(ndcg_at_k(&lists, &t, k).unwrap().value <= small + 1e-15);
        }

        #[test]
        fn invariant_under_relabel_and_reorder(seed in 0u64..500, k in 1usize..8) {
            let (lists, t, catalog) = instance(seed);
            let mut rng = Rng::new(seed + 1);
            let mut perm: Vec<usize> = (0..catalog).collect();
            rng.shuffle(&mut perm);
            let mut relabeled: Vec<RankedList> = lists
                .iter()
                .map(|l| RankedList::new(l.user_id.clone(), l.items.iter().map(|&i| perm[i]).collect(), l.scores.clone()).unwrap())
                .collect();
            relabeled.reverse();
            let t2: BTreeMap<String, usize> = t.iter().map(|(u, &i)| (u.clone(), perm[i])).collect();
            prop_assert_eq!(hr_at_k(&lists, &t, k).unwrap(), hr_at_k(&relabeled, &t2, k).unwrap());
            let a = ndcg_at_k(&lists, &t, k).unwrap().value;
            let b = ndcg_at_k(&relabeled, &t2, k).unwrap().value;
            prop_assert!((a - b).abs() < 1e-12);
            let a = mrr(&lists, &t).unwrap().value;
            let b = mrr(&relabeled, &t2).unwrap().value;
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert_eq!(coverage_at_100(&lists, catalog).unwrap(), coverage_at_100(&relabeled, catalog).unwrap());
        }
    }
}
