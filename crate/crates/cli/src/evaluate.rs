//! `volseg evaluate`: per-case metrics and a mean/median summary.

use std::path::Path;

use serde::Serialize;
use volseg::data::REGIONS;
use volseg::metrics::{evaluate_case, EvalResult};
use volseg::{Error, Result};

use crate::io::{label_ids, read_label};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Row {
    pub case: String,
    pub region: String,
    pub dice: f64,
    pub hausdorff_max_mm: Option<f64>,
    pub hausdorff95_mm: Option<f64>,
    pub sensitivity: f64,
    pub specificity: f64,
    pub pred_empty: bool,
    pub truth_empty: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub statistic: String,
    pub region: String,
    pub dice: f64,
    /// Over cases where the distance is defined; `None` if there are none.
    pub hausdorff_max_mm: Option<f64>,
    pub hausdorff95_mm: Option<f64>,
    pub sensitivity: f64,
    pub specificity: f64,
    pub cases: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub rows: Vec<Row>,
    pub summary: Vec<Summary>,
}

pub fn rows_for(case: &str, r: &EvalResult) -> Vec<Row> {
    r.regions
        .iter()
        .map(|m| Row {
            case: case.to_string(),
            region: m.region.clone(),
            dice: m.dice,
            hausdorff_max_mm: m.hausdorff_max_mm,
            hausdorff95_mm: m.hausdorff95_mm,
            sensitivity: m.sensitivity,
            specificity: m.specificity,
            pred_empty: m.flags.pred_empty,
            truth_empty: m.flags.truth_empty,
        })
        .collect()
}

pub fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) / 2.0 })
}

pub fn summarize(rows: &[Row]) -> Vec<Summary> {
    let mut out = Vec::new();
    for (name, stat) in [("mean", mean as fn(&[f64]) -> Option<f64>), ("median", median)] {
        for region in REGIONS {
            let rs: Vec<&Row> = rows.iter().filter(|r| r.region == region).collect();
            let col = |f: &dyn Fn(&Row) -> Option<f64>| stat(&rs.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
            out.push(Summary {
                statistic: name.into(),
                region: region.into(),
                dice: col(&|r| Some(r.dice)).unwrap_or(f64::NAN),
                hausdorff_max_mm: col(&|r| r.hausdorff_max_mm),
                hausdorff95_mm: col(&|r| r.hausdorff95_mm),
                sensitivity: col(&|r| Some(r.sensitivity)).unwrap_or(f64::NAN),
                specificity: col(&|r| Some(r.specificity)).unwrap_or(f64::NAN),
                cases: rs.len(),
            });
        }
    }
    out
}

pub fn evaluate_dirs(pred: &Path, truth: &Path) -> Result<Report> {
    let (p_ids, t_ids) = (label_ids(pred)?, label_ids(truth)?);
    let missing_pred: Vec<&String> = t_ids.iter().filter(|id| !p_ids.contains(id)).collect();
    let missing_truth: Vec<&String> = p_ids.iter().filter(|id| !t_ids.contains(id)).collect();
    if !missing_pred.is_empty() || !missing_truth.is_empty() {
        return Err(Error::Argument(format!(
            "case ids differ: missing predictions {missing_pred:?}, missing ground truth {missing_truth:?}"
        )));
    }
    if t_ids.is_empty() {
        return Err(Error::Argument(format!("{}: no labelled cases", truth.display())));
    }
    let mut rows = Vec::new();
    for id in &t_ids {
        let r = evaluate_case(&read_label(pred, id)?, &read_label(truth, id)?)?;
        rows.extend(rows_for(id, &r));
    }
    let summary = summarize(&rows);
    Ok(Report { rows, summary })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// CSV with the per-case rows followed by the summary rows; missing
/// distances are empty cells.
pub fn write_csv(report: &Report, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    let csv_err = |e: csv::Error| Error::Io(e.into());
    w.write_record(["case", "region", "dice", "hausdorff_max_mm", "hausdorff95_mm", "sensitivity", "specificity", "pred_empty", "truth_empty"])
        .map_err(csv_err)?;
    for r in &report.rows {
        w.write_record([
            r.case.clone(),
            r.region.clone(),
            r.dice.to_string(),
            cell(r.hausdorff_max_mm),
            cell(r.hausdorff95_mm),
            r.sensitivity.to_string(),
            r.specificity.to_string(),
            r.pred_empty.to_string(),
            r.truth_empty.to_string(),
        ])
        .map_err(csv_err)?;
    }
    for s in &report.summary {
        w.write_record([
            format!("<{}>", s.statistic),
            s.region.clone(),
            s.dice.to_string(),
            cell(s.hausdorff_max_mm),
            cell(s.hausdorff95_mm),
            s.sensitivity.to_string(),
            s.specificity.to_string(),
            String::new(),
            String::new(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `.json` output is the serialized [`Report`]; anything else is CSV.
pub fn cmd_evaluate(pred: &Path, truth: &Path, out: &Path) -> Result<Report> {
    let report = evaluate_dirs(pred, truth)?;
    if out.extension().is_some_and(|e| e == "json") {
        std::fs::write(out, serde_json::to_string_pretty(&report)? + "\n")?;
    } else {
        write_csv(&report, out)?;
    }
    for s in report.summary.iter().filter(|s| s.statistic == "mean") {
        log::info!(
            "event=evaluate region={} cases={} dice={:.4} hd95={} sensitivity={:.4} specificity={:.4}",
            s.region,
            s.cases,
            s.dice,
            cell(s.hausdorff95_mm),
            s.sensitivity,
            s.specificity
        );
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_and_mean() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(mean(&[1.0, 2.0]), Some(1.5));
        assert_eq!(mean(&[]), None);
    }
}
