//! Region probabilities to class labels, small-ET filtering and the
//! threshold grid search.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::region_dice;
use crate::tensor::{Shape3, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    Six,
    Eighteen,
    TwentySix,
}

impl Connectivity {
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dx in -1isize..=1 {
            for dy in -1isize..=1 {
                for dz in -1isize..=1 {
                    let n = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => n == 1,
                        Connectivity::Eighteen => n == 1 || n == 2,
                        Connectivity::TwentySix => n > 0,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessConfig {
    pub wt_threshold: f64,
    pub tc_threshold: f64,
    pub et_threshold: f64,
    pub component_min_size: usize,
    pub component_prob_threshold: f64,
    pub total_et_min: usize,
    pub connectivity: Connectivity,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            wt_threshold: 0.45,
            tc_threshold: 0.40,
            et_threshold: 0.45,
            component_min_size: 16,
            component_prob_threshold: 0.9,
            total_et_min: 73,
            connectivity: Connectivity::TwentySix,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("wt_threshold", self.wt_threshold),
            ("tc_threshold", self.tc_threshold),
            ("et_threshold", self.et_threshold),
        ] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {t}")));
            }
        }
        Ok(())
    }
}

/// Threshold cascade on `[3, H, W, D]` probabilities ordered (ET, TC, WT).
pub fn regions_to_classes(p: &Tensor<f32>, cfg: &PostprocessConfig) -> Tensor<u8> {
    assert_eq!(p.lead(), 3, "expected 3 region channels");
    let (et, tc, wt) = (p.volume(0), p.volume(1), p.volume(2));
    let data = (0..et.len())
        .map(|i| classify(wt[i], tc[i], et[i], cfg.wt_threshold, cfg.tc_threshold, cfg.et_threshold))
        .collect();
    Tensor::from_vec(p.spatial().to_vec(), data)
}

#[inline]
fn classify(wt: f32, tc: f32, et: f32, t_wt: f64, t_tc: f64, t_et: f64) -> u8 {
    if (wt as f64) < t_wt {
        0
    } else if (tc as f64) < t_tc {
        2
    } else if (et as f64) < t_et {
        1
    } else {
        4
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentSet {
    /// Component id per voxel, 0 outside the mask, ids dense from 1.
    pub labels: Vec<u32>,
    /// `sizes[id - 1]`.
    pub sizes: Vec<usize>,
}

impl ComponentSet {
    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    /// Mean of `values` over each component.
    pub fn means(&self, values: &[f32]) -> Vec<f64> {
        let mut sums = vec![0.0; self.sizes.len()];
        for (l, v) in self.labels.iter().zip(values) {
            if *l > 0 {
                sums[*l as usize - 1] += *v as f64;
            }
        }
        sums.iter().zip(&self.sizes).map(|(s, n)| s / *n as f64).collect()
    }
}

/// Labels connected components; ids follow the scan order of each
/// component's first voxel.
pub fn connected_components(mask: &[bool], shape: Shape3, conn: Connectivity) -> ComponentSet {
    assert_eq!(mask.len(), shape.iter().product::<usize>());
    let offsets = conn.offsets();
    let mut labels = vec![0u32; mask.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    let idx = |x: usize, y: usize, z: usize| (x * shape[1] + y) * shape[2] + z;
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        labels[start] = id;
        let mut size = 0;
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            size += 1;
            let (x, y, z) = (v / (shape[1] * shape[2]), (v / shape[2]) % shape[1], v % shape[2]);
            for o in &offsets {
                let (nx, ny, nz) = (x as isize + o[0], y as isize + o[1], z as isize + o[2]);
                if nx < 0 || ny < 0 || nz < 0 {
                    continue;
                }
                let (nx, ny, nz) = (nx as usize, ny as usize, nz as usize);
                if nx >= shape[0] || ny >= shape[1] || nz >= shape[2] {
                    continue;
                }
                let n = idx(nx, ny, nz);
                if mask[n] && labels[n] == 0 {
                    labels[n] = id;
                    queue.push_back(n);
                }
            }
        }
        sizes.push(size);
    }
    ComponentSet { labels, sizes }
}

/// First filtering stage: small, uncertain ET components become NCR.
fn filter_small_components(classes: &mut [u8], et_prob: &[f32], shape: Shape3, cfg: &PostprocessConfig) {
    if cfg.component_min_size == 0 {
        return;
    }
    let mask: Vec<bool> = classes.iter().map(|c| *c == 4).collect();
    let comps = connected_components(&mask, shape, cfg.connectivity);
    let means = comps.means(et_prob);
    let relabel: Vec<bool> = comps
        .sizes
        .iter()
        .zip(&means)
        .map(|(n, m)| *n < cfg.component_min_size && *m < cfg.component_prob_threshold)
        .collect();
    for (c, l) in classes.iter_mut().zip(&comps.labels) {
        if *l > 0 && relabel[*l as usize - 1] {
            *c = 1;
        }
    }
}

/// Remaining ET voxel count and their mean ET probability.
fn et_stats(classes: &[u8], et_prob: &[f32]) -> (usize, f64) {
    let (mut n, mut s) = (0usize, 0.0);
    for (c, p) in classes.iter().zip(et_prob) {
        if *c == 4 {
            n += 1;
            s += *p as f64;
        }
    }
    (n, if n == 0 { 0.0 } else { s / n as f64 })
}

fn global_rule_fires(count: usize, mean: f64, min_total: usize, prob_threshold: f64) -> bool {
    count > 0 && count < min_total && mean < prob_threshold
}

/// Two-stage ET filter; relabelled voxels become NCR (class 1).
pub fn filter_et(classes: &Tensor<u8>, p: &Tensor<f32>, cfg: &PostprocessConfig) -> Tensor<u8> {
    assert_eq!(classes.shape(), &p.shape()[1..], "classes and probabilities disagree");
    let et_prob = p.volume(0);
    let mut out = classes.clone();
    let shape = classes.spatial();
    filter_small_components(out.data_mut(), et_prob, shape, cfg);
    let (count, mean) = et_stats(out.data(), et_prob);
    if global_rule_fires(count, mean, cfg.total_et_min, cfg.component_prob_threshold) {
        out.data_mut().iter_mut().filter(|c| **c == 4).for_each(|c| *c = 1);
    }
    out
}

/// Cascade followed by the ET filter.
pub fn postprocess(p: &Tensor<f32>, cfg: &PostprocessConfig) -> Tensor<u8> {
    filter_et(&regions_to_classes(p, cfg), p, cfg)
}

/// Validation prediction used for tuning.
#[derive(Clone, Debug)]
pub struct TuneCase {
    pub fold: usize,
    pub probs: Tensor<f32>,
    pub truth: Tensor<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpec {
    pub wt_thresholds: Vec<f64>,
    pub tc_thresholds: Vec<f64>,
    pub et_thresholds: Vec<f64>,
    pub total_et_min: Vec<usize>,
}

/// `0.30, 0.35, ..., 0.70`.
pub fn default_threshold_grid() -> Vec<f64> {
    (0..=8).map(|i| (30 + 5 * i) as f64 / 100.0).collect()
}

impl Default for SearchSpec {
    fn default() -> Self {
        SearchSpec {
            wt_thresholds: default_threshold_grid(),
            tc_thresholds: default_threshold_grid(),
            et_thresholds: default_threshold_grid(),
            total_et_min: (0..=100).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub wt_threshold: f64,
    pub tc_threshold: f64,
    pub et_threshold: f64,
    pub total_et_min: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best: PostprocessConfig,
    pub best_score: f64,
    pub table: Vec<GridPoint>,
}

/// Mean over folds of the per-fold mean example Dice.
fn cross_fold_score(folds: &[usize], per_case: impl Fn(usize) -> f64, n_cases: usize) -> f64 {
    let mut by_fold: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for i in 0..n_cases {
        let e = by_fold.entry(folds[i]).or_default();
        e.0 += per_case(i);
        e.1 += 1;
    }
    by_fold.values().map(|(s, n)| s / *n as f64).sum::<f64>() / by_fold.len() as f64
}

/// Exhaustive search over `spec`, other fields taken from `base`. Points
/// are visited in lexicographic order (WT, TC, ET, total ET minimum) and a
/// point replaces the incumbent only when strictly better.
pub fn grid_search_thresholds(cases: &[TuneCase], spec: &SearchSpec, base: &PostprocessConfig) -> Result<GridSearchResult> {
    if cases.is_empty() {
        return Err(Error::Invalid("grid search needs at least one prediction".into()));
    }
    if [spec.wt_thresholds.len(), spec.tc_thresholds.len(), spec.et_thresholds.len(), spec.total_et_min.len()].contains(&0) {
        return Err(Error::Invalid("every search axis needs at least one value".into()));
    }
    for c in cases {
        if c.probs.lead() != 3 || c.probs.spatial() != c.truth.spatial() {
            return Err(Error::ShapeMismatch(format!(
                "probabilities {:?} vs labels {:?}",
                c.probs.shape(),
                c.truth.shape()
            )));
        }
    }
    let folds: Vec<usize> = cases.iter().map(|c| c.fold).collect();
    let mut table = Vec::new();
    let mut best: Option<GridPoint> = None;
    for &wt in &spec.wt_thresholds {
        for &tc in &spec.tc_thresholds {
            for &et in &spec.et_thresholds {
                let cfg = PostprocessConfig {
                    wt_threshold: wt,
                    tc_threshold: tc,
                    et_threshold: et,
                    ..base.clone()
                };
                // the global rule only toggles between two outcomes per case
                let per_case: Vec<(f64, f64, usize, f64)> = cases
                    .iter()
                    .map(|c| {
                        let mut classes = regions_to_classes(&c.probs, &cfg);
                        let et_prob = c.probs.volume(0);
                        let shape = classes.spatial();
                        filter_small_components(classes.data_mut(), et_prob, shape, &cfg);
                        let (count, mean) = et_stats(classes.data(), et_prob);
                        let kept = mean_dice(classes.data(), c.truth.data());
                        classes.data_mut().iter_mut().filter(|v| **v == 4).for_each(|v| *v = 1);
                        let dropped = mean_dice(classes.data(), c.truth.data());
                        (kept, dropped, count, mean)
                    })
                    .collect();
                for &m in &spec.total_et_min {
                    let score = cross_fold_score(
                        &folds,
                        |i| {
                            let (kept, dropped, count, mean) = per_case[i];
                            if global_rule_fires(count, mean, m, cfg.component_prob_threshold) {
                                dropped
                            } else {
                                kept
                            }
                        },
                        cases.len(),
                    );
                    let point = GridPoint {
                        wt_threshold: wt,
                        tc_threshold: tc,
                        et_threshold: et,
                        total_et_min: m,
                        score,
                    };
                    if best.as_ref().is_none_or(|b| score > b.score) {
                        best = Some(point.clone());
                    }
                    table.push(point);
                }
            }
        }
    }
    let b = best.expect("non-empty grid");
    Ok(GridSearchResult {
        best: PostprocessConfig {
            wt_threshold: b.wt_threshold,
            tc_threshold: b.tc_threshold,
            et_threshold: b.et_threshold,
            total_et_min: b.total_et_min,
            ..base.clone()
        },
        best_score: b.score,
        table,
    })
}

fn mean_dice(pred: &[u8], truth: &[u8]) -> f64 {
    region_dice(pred, truth).iter().sum::<f64>() / 3.0
}
