//! Region-based objective: batched Dice plus BCE or Focal per region, with
//! optional multi-scale deep supervision.
//!
//! Reduction: the Dice term is averaged over the three region channels, the
//! pixel-wise term is averaged over batch and voxels within a channel and
//! summed over channels. Gradients with respect to the logits are computed
//! in closed form.

use serde::{Deserialize, Serialize};

use crate::autograd::{self as ag, sigmoid_scalar, Var};
use crate::error::{Error, Result};
use crate::kernels::resample::AxisOperator;
use crate::model::NetworkOutput;
use crate::tensor::{Scalar, Shape3, Tensor};

/// Channel order of every region tensor.
pub const REGIONS: [&str; 3] = ["ET", "TC", "WT"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseLoss {
    Bce,
    Focal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub base: BaseLoss,
    pub focal_gamma: f64,
    pub dice_smooth: f64,
    /// Weight of the main output followed by each deep supervision head.
    pub deep_supervision_weights: Vec<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            base: BaseLoss::Bce,
            focal_gamma: 2.0,
            dice_smooth: 1e-5,
            deep_supervision_weights: vec![1.0, 0.5, 0.25],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::Config("focal_gamma must be >= 0".into()));
        }
        if !(self.dice_smooth > 0.0) {
            return Err(Error::Config("dice_smooth must be > 0".into()));
        }
        if self.deep_supervision_weights.is_empty() {
            return Err(Error::Config("deep_supervision_weights must not be empty".into()));
        }
        Ok(())
    }

    fn gamma(&self) -> Option<f64> {
        match self.base {
            BaseLoss::Bce => None,
            BaseLoss::Focal => Some(self.focal_gamma),
        }
    }
}

pub fn check_labels(y: &[u8], context: &str) -> Result<()> {
    match y.iter().find(|v| !matches!(**v, 0 | 1 | 2 | 4)) {
        Some(v) => Err(Error::InvalidLabel {
            value: *v,
            context: context.to_string(),
        }),
        None => Ok(()),
    }
}

/// `(ET, TC, WT)` membership of one class value.
pub fn class_regions(c: u8) -> [bool; 3] {
    [c == 4, c == 1 || c == 4, c != 0]
}

/// Class labels `[B, h, w, d]` (or `[h, w, d]`) to binary regions
/// `[B, 3, h, w, d]` (or `[3, h, w, d]`).
pub fn labels_to_regions<T: Scalar>(y: &Tensor<u8>) -> Result<Tensor<T>> {
    check_labels(y.data(), "labels_to_regions")?;
    let sp = y.spatial();
    let n: usize = sp.iter().product();
    let lead = if y.ndim() == 3 { 1 } else { y.lead() };
    let mut out = vec![T::zero(); lead * 3 * n];
    for b in 0..lead {
        let src = &y.data()[b * n..(b + 1) * n];
        for (i, c) in src.iter().enumerate() {
            for (r, on) in class_regions(*c).into_iter().enumerate() {
                if on {
                    out[(b * 3 + r) * n + i] = T::one();
                }
            }
        }
    }
    let mut shape = y.shape()[..y.ndim() - 3].to_vec();
    shape.push(3);
    shape.extend_from_slice(&sp);
    Ok(Tensor::from_vec(shape, out))
}

/// Nearest-neighbour label resampling (`src = floor(dst * in / out)`).
pub fn downsample_labels(y: &Tensor<u8>, out: Shape3) -> Tensor<u8> {
    let sp = y.spatial();
    let mut t = y.clone();
    for a in 0..3 {
        if sp[a] != out[a] {
            let op = AxisOperator::nearest(sp[a], out[a]);
            t = op.gather(&t, y.ndim() - 3 + a);
        }
    }
    t
}

/// `[B, C, ...]` channel sums pooled over batch and voxels.
fn channel_sums<T: Scalar>(x: &Tensor<T>, f: impl Fn(usize, T) -> f64) -> Vec<f64> {
    let c = x.shape()[1];
    let n: usize = x.shape()[2..].iter().product();
    let mut sums = vec![0.0; c];
    for (k, chunk) in x.data().chunks(n).enumerate() {
        let ch = k % c;
        let base = k * n;
        sums[ch] += chunk.iter().enumerate().map(|(i, v)| f(base + i, *v)).sum::<f64>();
    }
    sums
}

/// Batched soft Dice loss per channel, `1 - (2I + s) / (P + T + s)`.
pub fn dice_loss_per_channel<T: Scalar>(p: &Tensor<T>, t: &Tensor<T>, smooth: f64) -> Vec<f64> {
    assert_eq!(p.shape(), t.shape());
    let td = t.data();
    let ps = channel_sums(p, |_, v| v.to_f64().unwrap());
    let ts = channel_sums(t, |_, v| v.to_f64().unwrap());
    let is = channel_sums(p, |i, v| v.to_f64().unwrap() * td[i].to_f64().unwrap());
    (0..ps.len())
        .map(|c| 1.0 - (2.0 * is[c] + smooth) / (ps[c] + ts[c] + smooth))
        .collect()
}

/// Mean over channels of [`dice_loss_per_channel`].
pub fn dice_loss_batched<T: Scalar>(p: &Tensor<T>, t: &Tensor<T>, smooth: f64) -> f64 {
    let d = dice_loss_per_channel(p, t, smooth);
    d.iter().sum::<f64>() / d.len() as f64
}

/// Stable `-[t ln p + (1 - t) ln(1 - p)]` with `p = sigmoid(z)`.
pub fn bce_elem(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

/// `(1 - p_t)^gamma * bce`.
pub fn focal_elem(z: f64, t: f64, gamma: f64) -> f64 {
    let p = sigmoid_scalar(z);
    let q = sigmoid_scalar(-z);
    let one_minus_pt = t * q + (1.0 - t) * p;
    one_minus_pt.powf(gamma) * bce_elem(z, t)
}

fn base_elem_and_grad(z: f64, t: f64, gamma: Option<f64>) -> (f64, f64) {
    let p = sigmoid_scalar(z);
    let ce = bce_elem(z, t);
    match gamma {
        None => (ce, p - t),
        Some(g) => {
            let q = sigmoid_scalar(-z);
            let m = t * q + (1.0 - t) * p;
            let mod_g = if g == 0.0 { 1.0 } else { m.powf(g) };
            // d(1 - p_t)/dz = (1 - 2t) p (1 - p)
            let dm = (1.0 - 2.0 * t) * p * q;
            let first = if g == 0.0 { 0.0 } else { g * m.powf(g - 1.0) * dm * ce };
            (mod_g * ce, first + mod_g * (p - t))
        }
    }
}

/// Mean binary cross-entropy from logits over every element.
pub fn bce_loss<T: Scalar>(logits: &Tensor<T>, t: &Tensor<T>) -> f64 {
    mean_elem(logits, t, |z, t| bce_elem(z, t))
}

/// Mean focal loss from logits over every element.
pub fn focal_loss<T: Scalar>(logits: &Tensor<T>, t: &Tensor<T>, gamma: f64) -> f64 {
    mean_elem(logits, t, |z, t| focal_elem(z, t, gamma))
}

fn mean_elem<T: Scalar>(logits: &Tensor<T>, t: &Tensor<T>, f: impl Fn(f64, f64) -> f64) -> f64 {
    assert_eq!(logits.shape(), t.shape());
    let s: f64 = logits
        .data()
        .iter()
        .zip(t.data())
        .map(|(z, t)| f(z.to_f64().unwrap(), t.to_f64().unwrap()))
        .sum();
    s / logits.numel() as f64
}

/// Region loss and its gradient with respect to the logits `[B, C, ...]`.
pub fn region_loss_value_and_grad<T: Scalar>(logits: &Tensor<T>, t: &Tensor<T>, cfg: &LossConfig) -> (f64, Tensor<T>) {
    assert_eq!(logits.shape(), t.shape(), "logit/target shape mismatch");
    let shape = logits.shape();
    let (b, c) = (shape[0], shape[1]);
    let n: usize = shape[2..].iter().product();
    let per_channel = (b * n) as f64;
    let z: Vec<f64> = logits.data().iter().map(|v| v.to_f64().unwrap()).collect();
    let tv: Vec<f64> = t.data().iter().map(|v| v.to_f64().unwrap()).collect();
    let p: Vec<f64> = z.iter().map(|v| sigmoid_scalar(*v)).collect();

    let (mut ps, mut ts, mut is) = (vec![0.0; c], vec![0.0; c], vec![0.0; c]);
    for k in 0..b * c {
        let ch = k % c;
        for i in k * n..(k + 1) * n {
            ps[ch] += p[i];
            ts[ch] += tv[i];
            is[ch] += p[i] * tv[i];
        }
    }
    let s = cfg.dice_smooth;
    let mut dice_sum = 0.0;
    let mut denom = vec![0.0; c];
    for ch in 0..c {
        denom[ch] = ps[ch] + ts[ch] + s;
        dice_sum += 1.0 - (2.0 * is[ch] + s) / denom[ch];
    }
    let dice_w = 1.0 / c as f64;

    let gamma = cfg.gamma();
    let mut base = 0.0;
    let mut grad = vec![T::zero(); z.len()];
    for k in 0..b * c {
        let ch = k % c;
        let num = 2.0 * is[ch] + s;
        let d2 = denom[ch] * denom[ch];
        for i in k * n..(k + 1) * n {
            let (l, dl) = base_elem_and_grad(z[i], tv[i], gamma);
            base += l / per_channel;
            let d_dice_dp = -(2.0 * tv[i] * denom[ch] - num) / d2;
            let g = dice_w * d_dice_dp * p[i] * (1.0 - p[i]) + dl / per_channel;
            grad[i] = T::lit(g);
        }
    }
    (dice_w * dice_sum + base, Tensor::from_vec(shape.to_vec(), grad))
}

/// Differentiable region loss on one output head.
pub fn region_loss<T: Scalar>(logits: &Var<T>, targets: &Tensor<T>, cfg: &LossConfig) -> Var<T> {
    let (value, grad) = region_loss_value_and_grad(logits.value(), targets, cfg);
    ag::scalar_objective(logits, T::lit(value), grad)
}

/// Main-output region loss plus weighted deep supervision terms, with
/// labels nearest-downsampled to each head's shape.
pub fn deep_supervision_loss<T: Scalar>(out: &NetworkOutput<T>, y: &Tensor<u8>, cfg: &LossConfig) -> Result<Var<T>> {
    let heads = cfg.deep_supervision_weights.len() - 1;
    if out.ds.len() < heads {
        return Err(Error::Invalid(format!(
            "loss expects {heads} deep supervision outputs, network produced {}",
            out.ds.len()
        )));
    }
    let mut terms = vec![region_loss(&out.main, &labels_to_regions(y)?, cfg)];
    for head in &out.ds[..heads] {
        let yd = downsample_labels(y, head.value().spatial());
        terms.push(region_loss(head, &labels_to_regions(&yd)?, cfg));
    }
    Ok(ag::weighted_sum(&terms, &cfg.deep_supervision_weights))
}

/// Deep supervision loss when the network has DS heads, plain region loss
/// on the main output otherwise.
pub fn training_loss<T: Scalar>(out: &NetworkOutput<T>, y: &Tensor<u8>, cfg: &LossConfig) -> Result<Var<T>> {
    if out.ds.is_empty() {
        Ok(region_loss(&out.main, &labels_to_regions(y)?, cfg))
    } else {
        deep_supervision_loss(out, y, cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
    }

    fn random_labels(shape: Vec<usize>, seed: u64) -> Tensor<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| [0u8, 1, 2, 4][rng.random_range(0..4)]).collect())
    }

    #[test]
    fn class_to_region_mapping() {
        let y = Tensor::from_vec(vec![1, 1, 1, 4], vec![4u8, 2, 1, 0]);
        let r: Tensor<f64> = labels_to_regions(&y).unwrap();
        assert_eq!(r.shape(), &[1, 3, 1, 1, 4]);
        // ET, TC, WT planes
        assert_eq!(r.volume(0), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(r.volume(1), &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(r.volume(2), &[1.0, 1.0, 1.0, 0.0]);
        let bad = Tensor::from_vec(vec![1, 1, 1, 1], vec![3u8]);
        assert!(labels_to_regions::<f64>(&bad).is_err());
    }

    #[test]
    fn dice_extremes() {
        let t = random_labels(vec![1, 4, 4, 4], 1);
        let r: Tensor<f64> = labels_to_regions(&t).unwrap();
        assert!(dice_loss_batched(&r, &r, 1e-5) < 1e-6);
        let inv = r.map(|v| 1.0 - v);
        let half = Tensor::from_vec(vec![1, 1, 2, 2, 2], vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let anti = half.map(|v| 1.0 - v);
        assert!((dice_loss_batched(&anti, &half, 1e-5) - 1.0).abs() < 1e-5);
        assert!(dice_loss_batched(&inv, &r, 1e-5) > 0.99 || r.data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn batched_dice_differs_from_per_sample_mean() {
        // 2 samples of 2^3 voxels, one channel; sample A has an empty target
        let mut p = vec![0.0; 16];
        let mut t = vec![0.0; 16];
        p[0] = 0.5; // false positive in A
        for i in 8..12 {
            t[i] = 1.0;
            p[i] = 1.0;
        }
        let s = 1e-5;
        let pb = Tensor::from_vec(vec![2, 1, 2, 2, 2], p.clone());
        let tb = Tensor::from_vec(vec![2, 1, 2, 2, 2], t.clone());
        // pooled: I = 4, P = 4.5, T = 4
        let batched = 1.0 - (2.0 * 4.0 + s) / (4.5 + 4.0 + s);
        assert!((dice_loss_batched(&pb, &tb, s) - batched).abs() < 1e-12);
        // per sample: A = 1 - s/(0.5 + s), B = 1 - (8 + s)/(8 + s) = 0
        let per_sample = ((1.0 - s / (0.5 + s)) + 0.0) / 2.0;
        assert!((batched - per_sample).abs() > 0.4);
    }

    #[test]
    fn focal_reduces_to_bce_and_matches_hand_value() {
        let z = random(vec![1, 3, 4, 4, 4], 2, -4.0, 4.0);
        let t = labels_to_regions::<f64>(&random_labels(vec![1, 4, 4, 4], 3)).unwrap();
        assert!((focal_loss(&z, &t, 0.0) - bce_loss(&z, &t)).abs() < 1e-12);
        // p_t = 0.9 with y = 1
        let zl = (0.9f64 / 0.1).ln();
        assert!((focal_elem(zl, 1.0, 2.0) - 0.01 * -(0.9f64.ln())).abs() < 1e-12);
        assert!((focal_elem(zl, 1.0, 2.0) - 0.001054).abs() < 1e-6);
    }

    #[test]
    fn confident_predictions_drive_losses_to_zero() {
        let mut prev = (f64::INFINITY, f64::INFINITY);
        for z in [1.0, 4.0, 10.0, 30.0] {
            let cur = (bce_elem(z, 1.0) + bce_elem(-z, 0.0), focal_elem(z, 1.0, 2.0) + focal_elem(-z, 0.0, 2.0));
            assert!(cur.0 < prev.0 && cur.1 < prev.1);
            prev = cur;
        }
        assert!(prev.0 < 1e-12);
    }

    #[test]
    fn region_loss_recomposes_from_parts() {
        let z = random(vec![2, 3, 4, 4, 4], 4, -3.0, 3.0);
        let t = labels_to_regions::<f64>(&random_labels(vec![2, 4, 4, 4], 5)).unwrap();
        let p = z.map(|v| sigmoid_scalar(*v));
        for (base, gamma) in [(BaseLoss::Bce, 0.0), (BaseLoss::Focal, 2.0)] {
            let cfg = LossConfig {
                base,
                ..Default::default()
            };
            let (v, _) = region_loss_value_and_grad(&z, &t, &cfg);
            let elem = match base {
                BaseLoss::Bce => bce_loss(&z, &t),
                BaseLoss::Focal => focal_loss(&z, &t, gamma),
            };
            let expected = dice_loss_batched(&p, &t, cfg.dice_smooth) + 3.0 * elem;
            assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
        }
    }

    #[test]
    fn swapping_et_and_wt_changes_the_loss() {
        let y = Tensor::from_vec(vec![1, 2, 2, 2], vec![4u8, 2, 2, 2, 0, 0, 0, 0]);
        let t = labels_to_regions::<f64>(&y).unwrap();
        let z = random(vec![1, 3, 2, 2, 2], 6, -2.0, 2.0);
        let mut swapped = z.clone();
        let (et, wt) = (z.volume(0).to_vec(), z.volume(2).to_vec());
        swapped.volume_mut(0).copy_from_slice(&wt);
        swapped.volume_mut(2).copy_from_slice(&et);
        let cfg = LossConfig::default();
        let a = region_loss_value_and_grad(&z, &t, &cfg).0;
        let b = region_loss_value_and_grad(&swapped, &t, &cfg).0;
        assert!((a - b).abs() > 1e-6);
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let z = random(vec![2, 3, 4, 4, 4], 7, -3.0, 3.0);
        let t = labels_to_regions::<f64>(&random_labels(vec![2, 4, 4, 4], 8)).unwrap();
        for base in [BaseLoss::Bce, BaseLoss::Focal] {
            let cfg = LossConfig {
                base,
                ..Default::default()
            };
            let (_, g) = region_loss_value_and_grad(&z, &t, &cfg);
            let eps = 1e-6;
            for i in (0..z.numel()).step_by(7) {
                let mut zp = z.clone();
                zp.data_mut()[i] += eps;
                let mut zm = z.clone();
                zm.data_mut()[i] -= eps;
                let fd = (region_loss_value_and_grad(&zp, &t, &cfg).0 - region_loss_value_and_grad(&zm, &t, &cfg).0)
                    / (2.0 * eps);
                let an = g.data()[i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-12);
                assert!(rel < 1e-4, "{base:?} [{i}] fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn deep_supervision_weights_and_fallback() {
        let y = random_labels(vec![1, 8, 8, 8], 9);
        let z = random(vec![1, 3, 8, 8, 8], 10, -2.0, 2.0);
        let cfg = LossConfig {
            dice_smooth: 1e-12,
            ..Default::default()
        };
        // every head sees the same logits and (constant) labels: total = 1.75 L0
        let y0 = Tensor::full(vec![1, 8, 8, 8], 2u8);
        let z4 = Tensor::full(vec![1, 3, 4, 4, 4], 0.3);
        let z2 = Tensor::full(vec![1, 3, 2, 2, 2], 0.3);
        let z8 = Tensor::full(vec![1, 3, 8, 8, 8], 0.3);
        let l0 = region_loss_value_and_grad(&z8, &labels_to_regions(&y0).unwrap(), &cfg).0;
        let out = NetworkOutput {
            main: Var::constant(z8),
            ds: vec![Var::constant(z4), Var::constant(z2)],
        };
        let total = deep_supervision_loss(&out, &y0, &cfg).unwrap().item();
        // batched Dice (up to the smoothing term) and voxel means do not depend on the field size
        assert!((total - 1.75 * l0).abs() < 1e-9, "{total} vs {}", 1.75 * l0);

        let out = NetworkOutput {
            main: Var::constant(z.clone()),
            ds: vec![],
        };
        let plain = region_loss_value_and_grad(&z, &labels_to_regions(&y).unwrap(), &cfg).0;
        assert_eq!(training_loss(&out, &y, &cfg).unwrap().item(), plain);
        assert!(deep_supervision_loss(&out, &y, &cfg).is_err());
    }

    #[test]
    fn downsampled_targets_have_expected_shapes() {
        let y = random_labels(vec![1, 16, 16, 16], 11);
        assert_eq!(downsample_labels(&y, [8, 8, 8]).shape(), &[1, 8, 8, 8]);
        assert_eq!(downsample_labels(&y, [4, 4, 4]).shape(), &[1, 4, 4, 4]);
        let y = Tensor::<u8>::zeros(vec![128, 128, 128]);
        assert_eq!(downsample_labels(&y, [64, 64, 64]).shape(), &[64, 64, 64]);
        assert_eq!(downsample_labels(&y, [32, 32, 32]).shape(), &[32, 32, 32]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn regions_are_nested(labels in proptest::collection::vec(prop_oneof![Just(0u8), Just(1u8), Just(2u8), Just(4u8)], 27)) {
            let y = Tensor::from_vec(vec![1, 3, 3, 3], labels);
            let r: Tensor<f64> = labels_to_regions(&y).unwrap();
            for i in 0..27 {
                prop_assert!(r.volume(0)[i] <= r.volume(1)[i]);
                prop_assert!(r.volume(1)[i] <= r.volume(2)[i]);
            }
        }

        #[test]
        fn downsampling_introduces_no_new_classes(labels in proptest::collection::vec(prop_oneof![Just(0u8), Just(1u8), Just(2u8), Just(4u8)], 512)) {
            let y = Tensor::from_vec(vec![8, 8, 8], labels.clone());
            let d = downsample_labels(&y, [3, 4, 5]);
            for v in d.data() {
                prop_assert!(labels.contains(v));
            }
        }

        #[test]
        fn losses_are_bounded(seed in 0u64..1000) {
            let z = random(vec![1, 3, 3, 3, 3], seed, -6.0, 6.0);
            let t = labels_to_regions::<f64>(&random_labels(vec![1, 3, 3, 3], seed + 1)).unwrap();
            let p = z.map(|v| sigmoid_scalar(*v));
            let d = dice_loss_batched(&p, &t, 1e-5);
            prop_assert!((0.0..=1.0 + 1e-9).contains(&d));
            prop_assert!(bce_loss(&z, &t) >= 0.0);
            prop_assert!(focal_loss(&z, &t, 2.0) >= 0.0);
        }
    }
}
