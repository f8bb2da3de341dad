//! Region Dice scoring and cross-validation summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{check_labels, class_regions};
use crate::tensor::Tensor;

/// Dice of two binary masks: both empty gives 1, an empty truth with a
/// non-empty prediction gives 0.
pub fn dice_score(pred: &[bool], truth: &[bool]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "mask length mismatch");
    let (mut p, mut t, mut i) = (0usize, 0usize, 0usize);
    for (a, b) in pred.iter().zip(truth) {
        p += *a as usize;
        t += *b as usize;
        i += (*a && *b) as usize;
    }
    dice_from_counts(p, t, i)
}

pub fn dice_from_counts(pred: usize, truth: usize, intersection: usize) -> f64 {
    if pred + truth == 0 {
        1.0
    } else {
        2.0 * intersection as f64 / (pred + truth) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub id: String,
    pub fold: Option<usize>,
    /// ET, TC, WT.
    pub regions: [f64; 3],
    pub mean: f64,
}

/// Scores both class maps on the three nested regions.
pub fn region_dice(pred: &[u8], truth: &[u8]) -> [f64; 3] {
    assert_eq!(pred.len(), truth.len());
    let mut counts = [[0usize; 3]; 3];
    for (a, b) in pred.iter().zip(truth) {
        let (ra, rb) = (class_regions(*a), class_regions(*b));
        for r in 0..3 {
            counts[r][0] += ra[r] as usize;
            counts[r][1] += rb[r] as usize;
            counts[r][2] += (ra[r] && rb[r]) as usize;
        }
    }
    counts.map(|[p, t, i]| dice_from_counts(p, t, i))
}

/// Region Dice of `[3, ...]` probabilities thresholded at 0.5 per channel,
/// without the class cascade.
pub fn probability_region_dice(p: &Tensor<f32>, truth: &Tensor<u8>) -> Result<[f64; 3]> {
    if p.ndim() != 4 || p.lead() != 3 || p.spatial() != truth.spatial() {
        return Err(Error::ShapeMismatch(format!(
            "probabilities {:?} vs truth {:?}",
            p.shape(),
            truth.shape()
        )));
    }
    let mut out = [0.0; 3];
    for (r, o) in out.iter_mut().enumerate() {
        let (mut a, mut b, mut i) = (0, 0, 0);
        for (pv, t) in p.volume(r).iter().zip(truth.data()) {
            let x = *pv > 0.5;
            let y = class_regions(*t)[r];
            a += x as usize;
            b += y as usize;
            i += (x && y) as usize;
        }
        *o = dice_from_counts(a, b, i);
    }
    Ok(out)
}

pub fn region_dice_report(id: &str, fold: Option<usize>, pred: &Tensor<u8>, truth: &Tensor<u8>) -> Result<DiceReport> {
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs truth {:?} for {id}",
            pred.shape(),
            truth.shape()
        )));
    }
    check_labels(pred.data(), id)?;
    check_labels(truth.data(), id)?;
    let regions = region_dice(pred.data(), truth.data());
    Ok(DiceReport {
        id: id.to_string(),
        fold,
        regions,
        mean: regions.iter().sum::<f64>() / 3.0,
    })
}

/// Mean over examples of the per-example mean Dice.
pub fn fold_mean(reports: &[DiceReport]) -> f64 {
    if reports.is_empty() {
        return f64::NAN;
    }
    reports.iter().map(|r| r.mean).sum::<f64>() / reports.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossValSummary {
    /// `(fold, mean Dice)` sorted by fold.
    pub folds: Vec<(usize, f64)>,
    pub mean: f64,
}

pub fn summarize_fold_means(folds: Vec<(usize, f64)>) -> CrossValSummary {
    let mut folds = folds;
    folds.sort_by_key(|f| f.0);
    let mean = folds.iter().map(|f| f.1).sum::<f64>() / folds.len().max(1) as f64;
    CrossValSummary { folds, mean }
}

/// Groups reports by fold, averages each fold, then averages the folds.
pub fn cross_val_summary(reports: &[DiceReport]) -> CrossValSummary {
    let mut by_fold: BTreeMap<usize, Vec<DiceReport>> = BTreeMap::new();
    for r in reports {
        by_fold.entry(r.fold.unwrap_or(0)).or_default().push(r.clone());
    }
    summarize_fold_means(by_fold.into_iter().map(|(f, rs)| (f, fold_mean(&rs))).collect())
}

/// Fold-by-column table: one row per fold plus a final mean row.
pub fn render_table(title: &str, columns: &[(String, CrossValSummary)]) -> String {
    let folds: Vec<usize> = {
        let mut f: Vec<usize> = columns.iter().flat_map(|(_, s)| s.folds.iter().map(|f| f.0)).collect();
        f.sort_unstable();
        f.dedup();
        f
    };
    let label_w = "Mean Dice".len().max(title.len());
    let col_w = columns.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    let mut rows: Vec<(String, Vec<String>)> = Vec::new();
    for f in &folds {
        let cells = columns
            .iter()
            .map(|(_, s)| {
                s.folds
                    .iter()
                    .find(|(k, _)| k == f)
                    .map(|(_, v)| format!("{v:.4}"))
                    .unwrap_or_else(|| "-".into())
            })
            .collect();
        rows.push((format!("Fold {f}"), cells));
    }
    rows.push((
        "Mean Dice".into(),
        columns.iter().map(|(_, s)| format!("{:.4}", s.mean)).collect(),
    ));

    let rule = format!(
        "+{}+{}",
        "-".repeat(label_w + 2),
        columns.iter().map(|_| "-".repeat(col_w + 2)).collect::<Vec<_>>().join("+")
    ) + "+";
    let mut out = String::new();
    writeln!(out, "{rule}").unwrap();
    write!(out, "| {title:<label_w$} |").unwrap();
    for (name, _) in columns {
        write!(out, " {name:>col_w$} |").unwrap();
    }
    writeln!(out).unwrap();
    writeln!(out, "{rule}").unwrap();
    for (label, cells) in rows {
        write!(out, "| {label:<label_w$} |").unwrap();
        for c in cells {
            write!(out, " {c:>col_w$} |").unwrap();
        }
        writeln!(out).unwrap();
    }
    writeln!(out, "{rule}").unwrap();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn edge_conventions() {
        assert_eq!(dice_score(&[false; 4], &[false; 4]), 1.0);
        assert_eq!(dice_score(&[true, false], &[false, false]), 0.0);
        assert_eq!(dice_score(&[true, true, false], &[true, true, false]), 1.0);
        // |P| = 2, |T| = 4, overlap 2
        let p = [true, true, false, false];
        let t = [true; 4];
        assert!((dice_score(&p, &t) - 2.0 * 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn region_report_cases() {
        let truth = Tensor::from_vec(vec![1, 1, 3], vec![4u8, 1, 2]);
        let perfect = region_dice_report("a", None, &truth, &truth).unwrap();
        assert_eq!(perfect.regions, [1.0, 1.0, 1.0]);
        // every tumour voxel predicted as edema: WT right, TC and ET missed
        let pred = Tensor::from_vec(vec![1, 1, 3], vec![2u8, 2, 2]);
        let r = region_dice_report("a", None, &pred, &truth).unwrap();
        assert_eq!(r.regions, [0.0, 0.0, 1.0]);
        // ET predicted as NCR: ET 0, TC and WT intact
        let pred = Tensor::from_vec(vec![1, 1, 3], vec![1u8, 1, 2]);
        let r = region_dice_report("a", None, &pred, &truth).unwrap();
        assert_eq!(r.regions, [0.0, 1.0, 1.0]);
        let empty = Tensor::from_vec(vec![1, 1, 3], vec![0u8; 3]);
        assert_eq!(region_dice_report("e", None, &empty, &empty).unwrap().regions, [1.0; 3]);
    }

    #[test]
    fn table_one_mean() {
        let folds = vec![(0, 0.9087), (1, 0.9100), (2, 0.9162), (3, 0.9238), (4, 0.9061)];
        let s = summarize_fold_means(folds);
        assert!((s.mean - 0.9130).abs() < 5e-5);
        let table = render_table("Model", &[("U-Net".to_string(), s)]);
        assert!(table.contains("| Fold 0    |"));
        assert!(table.contains("0.9130"));
    }

    #[test]
    fn summary_nests_examples_then_folds() {
        let rep = |id: &str, fold, m| DiceReport {
            id: id.into(),
            fold: Some(fold),
            regions: [m; 3],
            mean: m,
        };
        let reports = vec![rep("a", 0, 1.0), rep("b", 0, 0.5), rep("c", 1, 0.0)];
        let s = cross_val_summary(&reports);
        assert_eq!(s.folds, vec![(0, 0.75), (1, 0.0)]);
        assert!((s.mean - 0.375).abs() < 1e-12);
        let mut rev = reports.clone();
        rev.reverse();
        assert_eq!(cross_val_summary(&rev), s);
    }

    proptest! {
        #[test]
        fn dice_is_symmetric_and_bounded(a in proptest::collection::vec(any::<bool>(), 1..64), seed in any::<u64>()) {
            let b: Vec<bool> = a.iter().enumerate().map(|(i, v)| v ^ ((seed >> (i % 64)) & 1 == 1)).collect();
            let d = dice_score(&a, &b);
            prop_assert_eq!(d, dice_score(&b, &a));
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert_eq!(d == 1.0, a == b);
        }
    }
}
