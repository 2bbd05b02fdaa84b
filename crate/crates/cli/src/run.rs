//! Command implementations behind the CLI surface.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};

use advpnml::checkpoint::{load_model, save_model};
use advpnml::eval::{evaluate, EvalReport};
use advpnml::model::ModelParams;
use advpnml::train::train;

use crate::config::ExperimentConfig;
use crate::table;

fn ensure_dir(out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)
        .with_context(|| format!("creating output directory {}", out.display()))
}

/// Default checkpoint location inside an output directory.
pub fn checkpoint_path(out: &Path) -> PathBuf {
    out.join("model.ckpt")
}

/// Write the synthetic point clouds as CSV files. Digit data comes from IDX
/// files on disk, so there is nothing to generate for it.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<()> {
    if !cfg.dataset.is_synthetic() {
        bail!("gen-data only applies to the synthetic dataset; digits load from IDX files");
    }
    ensure_dir(out)?;
    let (train_set, test_set) = cfg.dataset.load(cfg.seed)?;
    table::write_points_csv(&out.join("train.csv"), &train_set)?;
    table::write_points_csv(&out.join("test.csv"), &test_set)?;
    println!(
        "wrote {} training and {} test points under {}",
        train_set.len(),
        test_set.len(),
        out.display()
    );
    Ok(())
}

/// Train a model per the config and save checkpoint plus training log.
pub fn train_model(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<PathBuf> {
    ensure_dir(out)?;
    let (train_set, _) = cfg.dataset.load(cfg.seed)?;
    let mut params = ModelParams::<f32>::init(cfg.model.clone(), cfg.model_init_seed())?;
    let tcfg = cfg.train_config();
    println!(
        "training {} for {} epochs on {} samples",
        cfg.experiment_id,
        tcfg.epochs,
        train_set.len()
    );
    let started = std::time::Instant::now();
    let log = train(&mut params, &train_set, &tcfg, cfg.range())?;
    if let Some(last) = log.epochs.last() {
        println!(
            "finished in {:.1}s; final epoch loss {:.4}, accuracy {:.4}",
            started.elapsed().as_secs_f64(),
            last.mean_loss,
            last.accuracy
        );
    }

    let ckpt = checkpoint_path(out);
    let mut meta = BTreeMap::new();
    meta.insert("experiment_id".to_string(), cfg.experiment_id.clone());
    meta.insert("seed".to_string(), cfg.seed.to_string());
    save_model(&ckpt, &params, meta)?;
    table::write_train_log_csv(&out.join("train_log.csv"), &log)?;
    println!("saved checkpoint to {}", ckpt.display());
    Ok(ckpt)
}

/// Evaluate a checkpoint under the config's attack battery; write the result
/// table and per-sample predictions.
pub fn eval_model(
    cfg: &ExperimentConfig,
    out: &Path,
    checkpoint: &Path,
) -> anyhow::Result<(Vec<table::ResultRow>, EvalReport)> {
    ensure_dir(out)?;
    let (params, _) = load_model(checkpoint, Some(&cfg.model))?;
    let (_, test_set) = cfg.dataset.load(cfg.seed)?;
    let test_set = match cfg.eval.samples {
        Some(n) => test_set.first_n(n)?,
        None => test_set,
    };
    let defense = cfg.defense();
    println!(
        "evaluating {} rows on {} samples ({})",
        cfg.eval.attacks.len(),
        test_set.len(),
        match &defense {
            Some(d) => format!("defended, strength {}", d.strength),
            None => "undefended".to_string(),
        }
    );
    let report = evaluate(
        &params,
        &test_set,
        &cfg.eval.attacks,
        defense.as_ref(),
        cfg.range(),
        cfg.eval_seed(),
    )?;
    let n_classes = cfg.model.n_classes();
    let rows = table::result_rows(&cfg.experiment_id, &cfg.eval.attacks, &report, n_classes)?;
    table::write_results_csv(&out.join("results.csv"), &rows)?;
    table::write_predictions_csv(&out.join("predictions.csv"), &report, n_classes)?;
    for r in &rows {
        let base = report
            .rows
            .iter()
            .find(|row| row.name == r.attack)
            .map(|row| format!(" (base {:.4})", row.base_accuracy))
            .unwrap_or_default();
        println!(
            "  {:<14} eps {:<6} accuracy {:.4}{base}",
            r.attack, r.epsilon, r.adv_acc,
        );
    }
    Ok((rows, report))
}

/// Evaluate the same checkpoint at several defense strengths and stack all
/// rows into one table.
pub fn sweep_strengths(
    cfg: &ExperimentConfig,
    out: &Path,
    checkpoint: &Path,
    strengths: &[f64],
) -> anyhow::Result<Vec<table::ResultRow>> {
    if strengths.is_empty() {
        bail!("sweep needs at least one strength");
    }
    ensure_dir(out)?;
    let (params, _) = load_model(checkpoint, Some(&cfg.model))?;
    let (_, test_set) = cfg.dataset.load(cfg.seed)?;
    let test_set = match cfg.eval.samples {
        Some(n) => test_set.first_n(n)?,
        None => test_set,
    };
    let base_defense = cfg.defense().unwrap_or_else(|| {
        crate::config::DefenseConfig {
            strength: None,
            iterations: 1,
            candidates: None,
        }
        .resolve(&cfg.dataset)
    });
    let n_classes = cfg.model.n_classes();
    let mut all_rows = Vec::new();
    for &s in strengths {
        let mut defense = base_defense.clone();
        defense.strength = s;
        defense.validate(n_classes)?;
        let report = evaluate(
            &params,
            &test_set,
            &cfg.eval.attacks,
            Some(&defense),
            cfg.range(),
            cfg.eval_seed(),
        )?;
        let rows = table::result_rows(&cfg.experiment_id, &cfg.eval.attacks, &report, n_classes)?;
        for r in &rows {
            println!("  strength {s}: {:<14} accuracy {:.4}", r.attack, r.adv_acc);
        }
        all_rows.extend(rows);
    }
    table::write_results_csv(&out.join("results.csv"), &all_rows)?;
    Ok(all_rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::read_results_csv;

    fn toy_config(seed: u64) -> ExperimentConfig {
        serde_json::from_str(&format!(
            r#"{{
            "experiment_id": "toy_test",
            "dataset": {{"kind": "synthetic", "train_per_class": 60, "test_per_class": 15}},
            "model": {{"kind": "mlp", "widths": [2, 16, 2]}},
            "train": {{
                "epochs": 6, "batch_size": 30, "learning_rate": 0.1, "momentum": 0.9,
                "adversary": {{"kind": "pgd", "attack": {{"epsilon": 0.3, "step_size": 0.15, "iterations": 3}}}}
            }},
            "defense": {{"strength": 0.3}},
            "eval": {{"attacks": [
                {{"name": "natural", "kind": {{"attack": "natural"}}}},
                {{"name": "pgd", "kind": {{"attack": "pgd", "config": {{"epsilon": 0.5, "step_size": 0.1, "iterations": 5}}}}}}
            ]}},
            "seed": {seed}
        }}"#
        ))
        .unwrap()
    }

    #[test]
    fn train_then_eval_produces_a_complete_output_directory() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let cfg = toy_config(3);
        let ckpt = train_model(&cfg, &out).unwrap();
        assert!(ckpt.exists());
        assert!(out.join("train_log.csv").exists());

        let (rows, _) = eval_model(&cfg, &out, &ckpt).unwrap();
        assert_eq!(rows.len(), 3, "natural, pgd, best_attack");
        let (version, back) = read_results_csv(&out.join("results.csv")).unwrap();
        assert_eq!(version, table::RESULTS_VERSION);
        assert_eq!(back, rows);
        assert!(out.join("predictions.csv").exists());
    }

    #[test]
    fn eval_reruns_are_cell_exact_except_wall_time() {
        let dir = tempfile::tempdir().unwrap();
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        let cfg = toy_config(11);
        let ckpt = train_model(&cfg, &out_a).unwrap();
        let (rows_a, _) = eval_model(&cfg, &out_a, &ckpt).unwrap();
        let (rows_b, _) = eval_model(&cfg, &out_b, &ckpt).unwrap();
        for (a, b) in rows_a.iter().zip(&rows_b) {
            let mut a = a.clone();
            let mut b = b.clone();
            a.wall_time_s = 0.0;
            b.wall_time_s = 0.0;
            assert_eq!(a, b);
        }
    }

    #[test]
    fn sweep_stacks_rows_per_strength() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let cfg = toy_config(5);
        let ckpt = train_model(&cfg, &out).unwrap();
        let rows = sweep_strengths(&cfg, &out, &ckpt, &[0.0, 0.3]).unwrap();
        assert_eq!(rows.len(), 6, "three rows per strength");
        assert!(rows[..3].iter().all(|r| r.lambda == 0.0));
        assert!(rows[3..].iter().all(|r| r.lambda == 0.3));
    }

    #[test]
    fn gen_data_writes_point_files_for_synthetic_only() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("points");
        let cfg = toy_config(1);
        gen_data(&cfg, &out).unwrap();
        let text = std::fs::read_to_string(out.join("train.csv")).unwrap();
        assert_eq!(text.lines().next().unwrap(), "x0,x1,label");
        assert_eq!(text.lines().count(), 1 + 120);

        let mut digit_cfg = cfg;
        digit_cfg.dataset = serde_json::from_str(r#"{"kind": "mnist"}"#).unwrap();
        assert!(gen_data(&digit_cfg, &out).is_err());
    }
}
