//! Incremental feature ablation.

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::ReportTable;

use super::config::{ExperimentConfig, Flags};
use super::evaluate::{evaluate, EvalSplit};
use super::model::Resources;
use super::online::fit;

/// Row labels and flag sets: each step switches one more feature on, and the
/// last row runs with every flag set.
pub fn ablation_steps() -> Vec<(&'static str, Flags)> {
    let mut out = vec![("baseline", Flags::none())];
    let mut f = Flags::none();
    for (label, name) in [
        ("+fusion", "fusion"),
        ("+retrieval", "retrieval"),
        ("+debias", "debias"),
        ("+explain", "explain"),
        ("+adaptive", "adaptive"),
    ] {
        f = f.with(name).expect("known flag");
        out.push((label, f));
    }
    out.push(("full", Flags::all()));
    out
}

/// Trains and evaluates one configuration per step. Each row is the model
/// row of that run, renamed to the step label.
pub fn run_ablation(data: &Dataset, cfg: &ExperimentConfig, split: EvalSplit) -> Result<ReportTable> {
    let mut rows = Vec::new();
    for (label, flags) in ablation_steps() {
        let c = ExperimentConfig { flags, ..cfg.clone() };
        let report = run_one(data, &c, split)?;
        let mut row = report
            .row("model")
            .cloned()
            .ok_or_else(|| Error::Numerical("evaluation produced no model row".into()))?;
        row.system = label.to_string();
        log::info!("{label}: {}", row.metrics.get("hr@10").map(|v| format!("hr@10 {v:.4}")).unwrap_or_default());
        rows.push(row);
    }
    Ok(ReportTable { rows })
}

/// Full pipeline for one configuration: train, adapt if flagged, evaluate.
pub fn run_one(data: &Dataset, cfg: &ExperimentConfig, split: EvalSplit) -> Result<ReportTable> {
    let (trained, _) = fit(data, cfg)?;
    if let Some(msg) = &trained.diverged {
        return Err(Error::Numerical(format!("training diverged: {msg}")));
    }
    let res = Resources::new(data, cfg)?;
    evaluate(&trained.state.model, data, &res, cfg, split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic::{planted, PlantedConfig};
    use crate::dataset::DatasetOptions;

    #[test]
    fn steps_are_cumulative() {
        let steps = ablation_steps();
        assert_eq!(steps.len(), 7);
        assert_eq!(steps[0].1, Flags::none());
        assert_eq!(steps[6].1, Flags::all());
        assert_eq!(steps[2].1, Flags::parse("fusion,retrieval").unwrap());
        for w in steps.windows(2) {
            let on = |f: &Flags| [f.fusion, f.retrieval, f.debias, f.explain, f.adaptive].iter().filter(|b| **b).count();
            assert!(on(&w[1].1) >= on(&w[0].1));
        }
    }

    #[test]
    fn baseline_row_matches_a_standalone_run() {
        let data = planted(&PlantedConfig {
            n_users: 20,
            n_items: 30,
            n_categories: 4,
            min_interactions: 6,
            max_interactions: 8,
            ..Default::default()
        })
        .into_dataset(DatasetOptions::default())
        .unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.model.d = 6;
        cfg.model.dk = 3;
        cfg.model.blocks = 1;
        cfg.train.epochs = 1;
        cfg.debias.propensity_epochs = 5;
        cfg.adaptive.fisher_samples = 8;
        let table = run_ablation(&data, &cfg, EvalSplit::Test).unwrap();
        assert_eq!(table.rows.len(), 7);
        let alone = run_one(&data, &ExperimentConfig { flags: Flags::none(), ..cfg.clone() }, EvalSplit::Test).unwrap();
        assert_eq!(table.rows[0].metrics, alone.row("model").unwrap().metrics);
        assert_eq!(table.rows[0].system, "baseline");
    }
}
