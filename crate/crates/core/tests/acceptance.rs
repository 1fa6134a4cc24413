//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line.
//!
//! Tests share one lock so their wall-clock budgets are measured without
//! competing for the CPU.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use mmrec::dataset::synthetic::{planted, planted_two_task, PlantedConfig};
use mmrec::dataset::{Dataset, DatasetOptions};
use mmrec::debias::{ips_estimate, AdversaryInput, AdversaryObjective, PropensityModel};
use mmrec::eval::{self, MetricInputs, RankedList};
use mmrec::harness::model::{batch_loss, item_embeddings, retrieval_index, stack_options, Example};
use mmrec::harness::online::fit;
use mmrec::harness::serve::Server;
use mmrec::harness::train::{attach_context, consolidate, init_state, loss_options, reset_momentum, train_from, training_examples, TrainState};
use mmrec::harness::{evaluate, evaluate_checkpoint, Checkpoint, EvalSplit, ExperimentConfig, Flags, Resources};
use mmrec::numerics::{finite_diff_grad, max_relative_error, ParamSet, Rng, Tensor};
use mmrec::retrieval::{retrieve_top_k, ContextEntry, EntryKind, RetrievalConfig};

static SERIAL: Mutex<()> = Mutex::new(());

fn verdict(id: u32, name: &str, pass: bool, elapsed: Duration, budget: Duration, detail: String) {
    let ok = pass && elapsed <= budget;
    println!(
        "acceptance #{id} {name}: {} ({detail}; {:.1}s of {:.0}s)",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
    assert!(pass, "criterion {id} failed: {detail}");
    assert!(elapsed <= budget, "criterion {id} exceeded its time budget");
}

fn dataset(cfg: &PlantedConfig) -> Dataset {
    planted(cfg).into_dataset(DatasetOptions::default()).unwrap()
}

fn metric(data: &Dataset, cfg: &ExperimentConfig, state: &TrainState, name: &str) -> f64 {
    let res = Resources::new(data, cfg).unwrap();
    evaluate(&state.model, data, &res, cfg, EvalSplit::Test).unwrap().rows[0].metrics[name]
}

#[test]
fn c1_gradient_fidelity() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let data = dataset(&PlantedConfig {
        n_users: 8,
        n_items: 10,
        n_categories: 3,
        min_interactions: 4,
        max_interactions: 6,
        numeric_dim: 2,
        ..Default::default()
    });
    let mut worst = 0.0f64;
    let mut max_params = 0;
    for seed in 0..20u64 {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = seed;
        cfg.flags = Flags::all();
        cfg.model.d = 4;
        cfg.model.dk = 3;
        cfg.model.blocks = 1;
        cfg.model.max_tokens = 8;
        cfg.model.max_history = 4;
        cfg.debias.strata = 2;
        cfg.debias.propensity_epochs = 20;
        cfg.debias.fairness.lambda_fair = 1.0;
        cfg.debias.fairness.objective = [AdversaryObjective::Confusion, AdversaryObjective::Reversal][seed as usize % 2];
        cfg.debias.fairness.adversary_input = [AdversaryInput::Rating, AdversaryInput::Score, AdversaryInput::Representation][seed as usize % 3];
        cfg.adaptive.fisher_samples = 6;
        let res = Resources::new(&data, &cfg).unwrap();
        let mut state = init_state(&data, &cfg, &res).unwrap();
        consolidate(&mut state, &data, &cfg, &res, 2.0).unwrap();
        let mut rng = Rng::new(seed).fork(1);
        for t in state.model.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += 0.05 * rng.normal());
        }
        state.model.strata_bias = Tensor::vector(vec![0.0, 0.3]);
        max_params = max_params.max(state.model.num_params());

        let mut examples = training_examples(&data, &res, state.propensity.as_ref()).unwrap();
        rng.shuffle(&mut examples);
        let mut batch: Vec<Example> = Vec::new();
        for g in 0..2 {
            batch.extend(examples.iter().filter(|e| e.group == g).take(2).cloned());
        }
        let index = retrieval_index(&data, &res, &item_embeddings(&state.model, &res, stack_options(&cfg)).unwrap()).unwrap();
        attach_context(&mut batch, &state.model, &res, &index, &cfg).unwrap();
        let opts = loss_options(&cfg, batch.len());
        let adv = state.adversary.as_ref();
        let ewc = state.ewc.as_ref();
        let out = batch_loss(&state.model, &res, &batch, &opts, adv, ewc).unwrap();
        assert!(out.adversary_loss.is_some(), "no adversary term");
        assert!(out.ewc > 0.0, "no EWC term");
        assert!(batch.iter().any(|e| (e.weight - 1.0).abs() > 1e-3));
        let f = |flat: &[f64]| {
            let mut m = state.model.clone();
            m.assign_flat(flat).unwrap();
            batch_loss(&m, &res, &batch, &opts, adv, ewc).unwrap().value
        };
        let num = finite_diff_grad(f, &state.model.flatten(), 1e-4).unwrap();
        worst = worst.max(max_relative_error(&out.grads.flatten(), &num, 1e-6));
    }
    verdict(
        1,
        "gradient fidelity",
        worst <= 1e-4 && max_params <= 5000,
        t.elapsed(),
        Duration::from_secs(60),
        format!("max relative error {worst:.2e} over 20 seeds, {max_params} parameters"),
    );
}

#[test]
fn c2_ips_unbiasedness() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let n = 2000;
    let mut rng = Rng::new(11);
    let mut prop = PropensityModel::new(2, 1e-6);
    prop.w.data_mut().copy_from_slice(&[1.5, -0.8]);
    prop.b.data_mut()[0] = -0.5;
    let mut losses = Vec::with_capacity(n);
    let mut e = Vec::with_capacity(n);
    for _ in 0..n {
        let x = [rng.normal(), rng.normal()];
        let p = prop.estimate(&x).unwrap();
        // Exposed pairs tend to be the easy ones.
        losses.push(2.0 - 1.5 * p + 0.3 * rng.normal().abs());
        e.push(p);
    }
    let truth = losses.iter().sum::<f64>() / n as f64;
    let (mut ips, mut naive) = (Vec::new(), Vec::new());
    for _ in 0..100 {
        let (mut l, mut p) = (Vec::new(), Vec::new());
        for k in 0..n {
            if rng.bernoulli(e[k]) {
                l.push(losses[k]);
                p.push(e[k]);
            }
        }
        ips.push(ips_estimate(&l, &p, n).unwrap());
        naive.push(l.iter().sum::<f64>() / l.len() as f64);
    }
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        (m - truth, (var / v.len() as f64).sqrt())
    };
    let (ips_bias, ips_se) = stats(&ips);
    let (naive_bias, _) = stats(&naive);
    verdict(
        2,
        "IPS unbiasedness",
        ips_bias.abs() <= 2.0 * ips_se && naive_bias.abs() >= 3.0 * ips_bias.abs(),
        t.elapsed(),
        Duration::from_secs(60),
        format!("IPS bias {ips_bias:.2e} (SE {ips_se:.2e}), naive bias {naive_bias:.2e}"),
    );
}

#[test]
fn c3_retrieval_exactness() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let mut rng = Rng::new(3);
    let d = 8;
    let mut index: Vec<ContextEntry> = Vec::with_capacity(1000);
    for id in 0..1000 {
        // Every fourth entry duplicates an earlier one so scores tie exactly.
        let (embedding, timestamp, credibility) = if id % 4 == 3 {
            let src = &index[rng.index(index.len())];
            (src.embedding.clone(), src.timestamp, src.credibility)
        } else {
            (
                (0..d).map(|_| rng.normal()).collect(),
                1_600_000_000 + rng.index(200 * 86_400) as i64,
                (rng.index(5) as f64) / 4.0,
            )
        };
        index.push(ContextEntry {
            entry_id: 1000 - id,
            kind: EntryKind::Item,
            source_id: format!("i{id}"),
            source_index: id,
            embedding,
            timestamp,
            credibility,
            text: String::new(),
        });
    }
    let mut mismatches = 0;
    let mut ties = 0;
    for qn in 0..100 {
        let q: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let now = 1_600_000_000 + rng.index(200 * 86_400) as i64;
        let cfg = RetrievalConfig {
            k: [1, 5, 10, 50][qn % 4],
            ..Default::default()
        };
        let got: Vec<usize> = retrieve_top_k(&q, now, &index, &cfg)
            .unwrap()
            .entries
            .iter()
            .map(|s| s.entry.entry_id)
            .collect();
        let qnorm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut all: Vec<(f64, usize)> = index
            .iter()
            .map(|e| {
                let en = e.embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
                let cos = (q.iter().zip(&e.embedding).map(|(a, b)| a * b).sum::<f64>() / (qnorm * en)).clamp(-1.0, 1.0);
                let dt = (now - e.timestamp) as f64;
                let temporal = (-dt * dt / (2.0 * cfg.sigma * cfg.sigma)).exp();
                let s = cfg.lambda[0] * cos + cfg.lambda[1] * temporal + cfg.lambda[2] * e.credibility;
                (s, e.entry_id)
            })
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let top: Vec<(f64, usize)> = all[..cfg.k].to_vec();
        ties += top.windows(2).filter(|w| w[0].0 == w[1].0).count();
        if got != top.iter().map(|x| x.1).collect::<Vec<_>>() {
            mismatches += 1;
        }
    }
    verdict(
        3,
        "retrieval exactness",
        mismatches == 0 && ties > 0,
        t.elapsed(),
        Duration::from_secs(10),
        format!("{mismatches} of 100 queries differ from the sort oracle; {ties} tied neighbours in the oracle lists"),
    );
}

#[test]
fn c4_ewc_forgetting() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let (a, b) = planted_two_task(&PlantedConfig::default());
    let a = a.into_dataset(DatasetOptions::default()).unwrap();
    let b = b.into_dataset(DatasetOptions::default()).unwrap();
    let lambdas = [0.0, 1.0, 10.0, 100.0];
    let mut drops = [0.0; 4];
    let seeds = [0u64, 1, 2];
    for &seed in &seeds {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = seed;
        let ra = Resources::new(&a, &cfg).unwrap();
        let rb = Resources::new(&b, &cfg).unwrap();
        let task_a = train_from(init_state(&a, &cfg, &ra).unwrap(), &a, &cfg, &ra, cfg.train.epochs).unwrap();
        let before = metric(&a, &cfg, &task_a.state, "hr@10");
        let mut cfg_b = cfg.clone();
        cfg_b.train.lr = 0.02;
        for (k, &lambda) in lambdas.iter().enumerate() {
            let mut s = task_a.state.clone();
            if lambda > 0.0 {
                consolidate(&mut s, &a, &cfg, &ra, lambda).unwrap();
            }
            reset_momentum(&mut s);
            let after = train_from(s, &b, &cfg_b, &rb, 4).unwrap();
            drops[k] += (before - metric(&a, &cfg, &after.state, "hr@10")) / seeds.len() as f64;
        }
    }
    let ratios: Vec<f64> = drops[1..].iter().map(|d| d / drops[0]).collect();
    let best = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    verdict(
        4,
        "EWC forgetting",
        drops[0] > 0.0 && best <= 0.5,
        t.elapsed(),
        Duration::from_secs(180),
        format!(
            "mean task-A HR@10 drop {:.3} without EWC; ratio {:.2}/{:.2}/{:.2} at lambda 1/10/100",
            drops[0], ratios[0], ratios[1], ratios[2]
        ),
    );
}

#[test]
fn c5_fairness_mechanism() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let data = dataset(&PlantedConfig {
        group_purity: vec![0.95, 0.5],
        ..Default::default()
    });
    let seeds = [0u64, 1, 2];
    let (mut gap, mut ndcg) = ([0.0; 2], [0.0; 2]);
    for &seed in &seeds {
        for (k, lambda) in [0.0, 1.0].into_iter().enumerate() {
            let mut cfg = ExperimentConfig::default();
            cfg.seed = seed;
            cfg.flags = Flags::parse("fusion,debias").unwrap();
            cfg.debias.fairness.lambda_fair = lambda;
            let (trained, _) = fit(&data, &cfg).unwrap();
            assert!(trained.diverged.is_none());
            gap[k] += metric(&data, &cfg, &trained.state, "parity_gap") / seeds.len() as f64;
            ndcg[k] += metric(&data, &cfg, &trained.state, "ndcg@10") / seeds.len() as f64;
        }
    }
    let reduction = 1.0 - gap[1] / gap[0];
    let degradation = 1.0 - ndcg[1] / ndcg[0];
    verdict(
        5,
        "fairness mechanism",
        reduction >= 0.30 && degradation <= 0.10,
        t.elapsed(),
        Duration::from_secs(180),
        format!(
            "mean parity gap {:.3} -> {:.3} ({:.0}% lower), NDCG@10 {:.4} -> {:.4} ({:+.1}%)",
            gap[0],
            gap[1],
            100.0 * reduction,
            ndcg[0],
            ndcg[1],
            -100.0 * degradation
        ),
    );
}

#[test]
fn c6_end_to_end_learning() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let data = dataset(&PlantedConfig::default());
    assert_eq!((data.n_users(), data.n_items()), (200, 500));
    let mut cfg = ExperimentConfig::default();
    cfg.flags = Flags::all();
    let (trained, _) = fit(&data, &cfg).unwrap();
    let res = Resources::new(&data, &cfg).unwrap();
    let report = evaluate(&trained.state.model, &data, &res, &cfg, EvalSplit::Test).unwrap();
    let hr = report.row("model").unwrap().metrics["hr@10"];
    let pop = report.row("popularity").unwrap().metrics["hr@10"];
    verdict(
        6,
        "end-to-end learning",
        trained.diverged.is_none() && hr >= 0.10 && hr > pop,
        t.elapsed(),
        Duration::from_secs(300),
        format!("HR@10 {hr:.3} vs popularity {pop:.3}"),
    );
}

fn oracle_rank(items: &[usize], target: usize) -> Option<usize> {
    items.iter().position(|&i| i == target).map(|p| p + 1)
}

#[test]
fn c7_metric_oracles() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let mut rng = Rng::new(7);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let catalog = 6 + rng.index(10);
        let users = 2 + rng.index(6);
        let len = 1 + rng.index(catalog.min(12));
        let emb: Vec<Vec<f64>> = (0..catalog).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
        let popularity: Vec<usize> = (0..catalog).map(|_| rng.index(6)).collect();
        let mut lists = Vec::new();
        let mut truth = BTreeMap::new();
        let mut groups = BTreeMap::new();
        for u in 0..users {
            let mut items: Vec<usize> = (0..catalog).collect();
            rng.shuffle(&mut items);
            items.truncate(len);
            let scores: Vec<f64> = (0..len).map(|r| (len - r) as f64).collect();
            let id = format!("u{u}");
            truth.insert(id.clone(), rng.index(catalog));
            groups.insert(id.clone(), u % 2);
            lists.push(RankedList::new(id, items, scores).unwrap());
        }
        let cutoffs = [1, 3, 5];
        let inputs = MetricInputs {
            truth: &truth,
            cutoffs: &cutoffs,
            embeddings: &emb,
            popularity: &popularity,
            groups: &groups,
            n_groups: 2,
            fairness_tau: None,
        };
        let got = eval::compute_metrics(&lists, &inputs).unwrap();

        let mut want = BTreeMap::new();
        let n = lists.len() as f64;
        for &k in &cutoffs {
            let (mut hr, mut nd) = (0.0, 0.0);
            for l in &lists {
                if let Some(r) = oracle_rank(&l.items, truth[&l.user_id]).filter(|&r| r <= k) {
                    hr += 1.0;
                    nd += std::f64::consts::LN_2 / ((r + 1) as f64).ln();
                }
            }
            want.insert(format!("hr@{k}"), hr / n);
            want.insert(format!("ndcg@{k}"), nd / n);
        }
        want.insert(
            "mrr".to_string(),
            lists.iter().map(|l| oracle_rank(&l.items, truth[&l.user_id]).map_or(0.0, |r| 1.0 / r as f64)).sum::<f64>() / n,
        );
        let mut ild = 0.0;
        for l in &lists {
            let top = &l.items[..l.items.len().min(10)];
            let mut pairs = Vec::new();
            for a in top {
                for b in top {
                    if a < b {
                        let (x, y) = (&emb[*a], &emb[*b]);
                        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                        let nx = x.iter().map(|p| p * p).sum::<f64>().sqrt();
                        let ny = y.iter().map(|p| p * p).sum::<f64>().sqrt();
                        pairs.push(1.0 - dot / (nx * ny));
                    }
                }
            }
            ild += if pairs.is_empty() { 0.0 } else { pairs.iter().sum::<f64>() / pairs.len() as f64 };
        }
        want.insert("ild".to_string(), ild / n);
        let distinct: BTreeSet<usize> = lists.iter().flat_map(|l| l.items.iter().copied()).collect();
        want.insert("coverage@100".to_string(), distinct.len() as f64 / catalog as f64);
        let total: usize = popularity.iter().sum();
        let (mut nov, mut slots) = (0.0, 0.0);
        for l in &lists {
            for &i in l.items.iter().take(10) {
                nov += if popularity[i] == 0 {
                    1.0
                } else {
                    let f = popularity[i] as f64 / total as f64;
                    (f.ln() / (1.0 / catalog as f64).ln()).clamp(0.0, 1.0)
                };
                slots += 1.0;
            }
        }
        want.insert("novelty".to_string(), nov / slots);
        let pooled: Vec<f64> = {
            let mut v: Vec<f64> = lists.iter().flat_map(|l| l.scores.iter().take(10).copied()).collect();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v
        };
        let m = pooled.len();
        let tau = if m % 2 == 1 { pooled[m / 2] } else { (pooled[m / 2 - 1] + pooled[m / 2]) / 2.0 };
        let rate = |g: usize| {
            let s: Vec<f64> = lists
                .iter()
                .filter(|l| groups[&l.user_id] == g)
                .flat_map(|l| l.scores.iter().take(10).copied())
                .collect();
            s.iter().filter(|&&x| x > tau).count() as f64 / s.len() as f64
        };
        want.insert("fairness".to_string(), 1.0 - (rate(0) - rate(1)).abs());

        assert_eq!(got.keys().collect::<Vec<_>>(), want.keys().collect::<Vec<_>>());
        for (k, w) in &want {
            worst = worst.max((got[k] - w).abs());
        }
    }
    let one = RankedList::new("u", vec![4, 7], vec![2.0, 1.0]).unwrap();
    let truth = BTreeMap::from([("u".to_string(), 7usize)]);
    let rank2 = eval::ndcg_at_k(&[one], &truth, 10).unwrap().value;
    let expected = 1.0 / 3f64.log2();
    verdict(
        7,
        "metric oracles",
        worst <= 1e-12 && (rank2 - expected).abs() <= 1e-12 && (rank2 - 0.63093).abs() < 1e-5,
        t.elapsed(),
        Duration::from_secs(60),
        format!("max deviation {worst:.1e} over 50 instances; NDCG at rank 2 = {rank2:.5}"),
    );
}

#[test]
fn c8_ablation_direction() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let data = dataset(&PlantedConfig::default());
    let steps = [Flags::none(), Flags::parse("fusion").unwrap(), Flags::parse("fusion,retrieval").unwrap()];
    let seeds = [0u64, 1, 2];
    let mut hr = [[0.0; 3]; 3];
    for (s, &seed) in seeds.iter().enumerate() {
        for (k, &flags) in steps.iter().enumerate() {
            let cfg = ExperimentConfig {
                seed,
                flags,
                ..Default::default()
            };
            let (trained, _) = fit(&data, &cfg).unwrap();
            hr[s][k] = metric(&data, &cfg, &trained.state, "hr@10");
        }
    }
    let mean = |k: usize| hr.iter().map(|r| r[k]).sum::<f64>() / seeds.len() as f64;
    let fusion = mean(1) - mean(0);
    let retrieval = mean(2) - mean(1);
    let per_seed: Vec<String> = hr
        .iter()
        .map(|r| format!("{:+.1}/{:+.1}", 100.0 * (r[1] - r[0]), 100.0 * (r[2] - r[1])))
        .collect();
    verdict(
        8,
        "ablation direction",
        fusion >= -0.01 && retrieval >= -0.01,
        t.elapsed(),
        Duration::from_secs(600),
        format!(
            "mean HR@10 change {:+.1}pp for fusion, {:+.1}pp for retrieval; per seed {}",
            100.0 * fusion,
            100.0 * retrieval,
            per_seed.join(" ")
        ),
    );
}

#[test]
fn c9_determinism_and_persistence() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let data = dataset(&PlantedConfig {
        n_users: 60,
        n_items: 120,
        ..Default::default()
    });
    let mut cfg = ExperimentConfig::default();
    cfg.flags = Flags::all();
    cfg.train.epochs = 2;
    cfg.debias.propensity_epochs = 50;
    let run = || {
        let (trained, _) = fit(&data, &cfg).unwrap();
        let ck = Checkpoint::new(&cfg, &data, trained.state);
        let res = Resources::new(&data, &cfg).unwrap();
        let recs: Vec<String> = ["u0", "u7", "u33"]
            .iter()
            .map(|u| serde_json::to_string(&Server::new(&ck.state.model, &data, &res, &cfg).unwrap().recommend(u, 10).unwrap()).unwrap())
            .collect();
        (ck, recs)
    };
    let (a, recs_a) = run();
    let (b, recs_b) = run();
    let bytes = a.to_bytes().unwrap();
    let same_ck = bytes == b.to_bytes().unwrap();
    let same_recs = recs_a == recs_b;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    a.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let direct = evaluate_checkpoint(&a, &data, EvalSplit::Test).unwrap();
    let reloaded = evaluate_checkpoint(&loaded, &data, EvalSplit::Test).unwrap();
    let same_report = direct == reloaded && direct.to_json().unwrap() == reloaded.to_json().unwrap();
    verdict(
        9,
        "determinism and persistence",
        same_ck && same_recs && loaded == a && same_report,
        t.elapsed(),
        Duration::from_secs(120),
        format!(
            "checkpoints identical: {same_ck}, recommendations identical: {same_recs}, reloaded report identical: {same_report} ({} bytes)",
            bytes.len()
        ),
    );
}
