//! CSV serialization of results, predictions, training logs, and point sets.
//!
//! The result table is the stable interface other tooling reads: a version
//! comment line, a fixed header, one row per attack, and a final
//! `best_attack` row repeating the strongest attack's numbers. All numeric
//! cells print with Rust's shortest-roundtrip float formatting, so equal
//! runs produce byte-equal cells.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context};

use advpnml::data::LabeledSet;
use advpnml::eval::{EvalAttack, EvalAttackKind, EvalReport};
use advpnml::train::TrainLog;

/// First line of every results file.
pub const RESULTS_VERSION: &str = "results v1";

/// One line of the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub experiment_id: String,
    pub attack: String,
    pub epsilon: f64,
    pub lambda: f64,
    pub hypotheses: usize,
    pub natural_acc: f64,
    pub adv_acc: f64,
    pub regret_mean: Option<f64>,
    pub wall_time_s: f64,
}

const RESULT_HEADER: [&str; 9] = [
    "experiment_id",
    "attack",
    "epsilon",
    "lambda",
    "hypotheses",
    "natural_acc",
    "adv_acc",
    "regret_mean",
    "wall_time_s",
];

/// Flatten an evaluation into table rows. `attacks` must be the battery the
/// report was produced with (it tells natural rows apart from attack rows).
/// Appends a `best_attack` row carrying the lowest attacked accuracy.
pub fn result_rows(
    experiment_id: &str,
    attacks: &[EvalAttack],
    report: &EvalReport,
    n_classes: usize,
) -> anyhow::Result<Vec<ResultRow>> {
    if attacks.len() != report.rows.len() {
        bail!("{} attack configs vs {} report rows", attacks.len(), report.rows.len());
    }
    let natural = attacks
        .iter()
        .zip(&report.rows)
        .find(|(a, _)| matches!(a.kind, EvalAttackKind::Natural {}))
        .map(|(_, r)| r.accuracy);
    let Some(natural_acc) = natural else {
        bail!("the attack battery must include a natural row");
    };
    let (lambda, hypotheses) = match &report.defense {
        Some(d) => (d.strength, d.n_candidates(n_classes)),
        None => (0.0, 0),
    };

    let mut rows: Vec<ResultRow> = report
        .rows
        .iter()
        .map(|r| ResultRow {
            experiment_id: experiment_id.to_string(),
            attack: r.name.clone(),
            epsilon: r.epsilon,
            lambda,
            hypotheses,
            natural_acc,
            adv_acc: r.accuracy,
            regret_mean: r.mean_regret,
            wall_time_s: r.wall_seconds,
        })
        .collect();

    let best = attacks
        .iter()
        .zip(&rows)
        .filter(|(a, _)| !matches!(a.kind, EvalAttackKind::Natural {}))
        .map(|(_, row)| row)
        .min_by(|a, b| a.adv_acc.partial_cmp(&b.adv_acc).expect("accuracies are finite"));
    if let Some(best) = best {
        let mut row = best.clone();
        row.attack = "best_attack".into();
        rows.push(row);
    }
    Ok(rows)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write the results table: version comment, header, rows.
pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(format!("# {RESULTS_VERSION}\n").as_bytes());
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(RESULT_HEADER)?;
        for r in rows {
            w.write_record([
                r.experiment_id.as_str(),
                r.attack.as_str(),
                &r.epsilon.to_string(),
                &r.lambda.to_string(),
                &r.hypotheses.to_string(),
                &r.natural_acc.to_string(),
                &r.adv_acc.to_string(),
                &fmt_opt(r.regret_mean),
                &r.wall_time_s.to_string(),
            ])?;
        }
        w.flush()?;
    }
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Read a results table back. Returns the version line's content and rows.
pub fn read_results_csv(path: &Path) -> anyhow::Result<(String, Vec<ResultRow>)> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let version = match lines.next() {
        Some(l) if l.starts_with("# ") => l[2..].to_string(),
        other => bail!("missing version comment line, found {other:?}"),
    };
    let rest: String = lines.collect::<Vec<_>>().join("\n");
    let mut reader = csv::Reader::from_reader(rest.as_bytes());
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != RESULT_HEADER {
        bail!("unexpected header {headers:?}");
    }
    let parse = |s: &str, what: &str| -> anyhow::Result<f64> {
        s.parse::<f64>().with_context(|| format!("parsing {what} cell {s:?}"))
    };
    let mut rows = Vec::new();
    for record in reader.records() {
        let r = record?;
        if r.len() != RESULT_HEADER.len() {
            bail!("row with {} cells", r.len());
        }
        rows.push(ResultRow {
            experiment_id: r[0].to_string(),
            attack: r[1].to_string(),
            epsilon: parse(&r[2], "epsilon")?,
            lambda: parse(&r[3], "lambda")?,
            hypotheses: r[4].parse().context("parsing hypotheses cell")?,
            natural_acc: parse(&r[5], "natural_acc")?,
            adv_acc: parse(&r[6], "adv_acc")?,
            regret_mean: if r[7].is_empty() { None } else { Some(parse(&r[7], "regret_mean")?) },
            wall_time_s: parse(&r[8], "wall_time_s")?,
        });
    }
    Ok((version, rows))
}

/// Per-sample predictions for every attack row: true label, base and
/// defended predictions, the full normalized assignment, the log normalizer,
/// and the decision attack's distance when applicable.
pub fn write_predictions_csv(
    path: &Path,
    report: &EvalReport,
    n_classes: usize,
) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("writing {}", path.display()))?;
    let mut header = vec![
        "attack".to_string(),
        "index".to_string(),
        "label".to_string(),
        "base_pred".to_string(),
        "defended_pred".to_string(),
        "regret".to_string(),
        "l2".to_string(),
    ];
    for c in 0..n_classes {
        header.push(format!("q{c}"));
    }
    w.write_record(&header)?;
    for row in &report.rows {
        for s in &row.samples {
            let mut rec = vec![
                row.name.clone(),
                s.index.to_string(),
                s.label.to_string(),
                s.base_pred.to_string(),
                s.defended_pred.map(|p| p.to_string()).unwrap_or_default(),
                fmt_opt(s.regret),
                fmt_opt(s.l2),
            ];
            match &s.q {
                Some(q) => rec.extend(q.iter().map(|v| v.to_string())),
                None => rec.extend(std::iter::repeat_n(String::new(), n_classes)),
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-epoch training log.
pub fn write_train_log_csv(path: &Path, log: &TrainLog) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["epoch", "mean_loss", "accuracy"])?;
    for e in &log.epochs {
        w.write_record([
            e.epoch.to_string(),
            e.mean_loss.to_string(),
            e.accuracy.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Flat point dump of a two-dimensional labeled set: x0, x1, label.
pub fn write_points_csv(path: &Path, set: &LabeledSet<f32>) -> anyhow::Result<()> {
    if set.input_shape() != [2] {
        bail!("point dump expects two-dimensional inputs, got {:?}", set.input_shape());
    }
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["x0", "x1", "label"])?;
    for i in 0..set.len() {
        let p = set.input(i).data();
        w.write_record([p[0].to_string(), p[1].to_string(), set.label(i).to_string()])?;
    }
    w.flush()?;
    Ok(())
}
