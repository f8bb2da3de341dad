//! Training-time augmentation: biased crop, zoom, flips, noise, blur,
//! brightness and contrast, applied in that order.
//!
//! Image tensors are `[5, H, W, D]` with the foreground mask last; only the
//! spatial transforms touch the mask and the label.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::resample::AxisOperator;
use crate::tensor::{offset3, symmetric_pad, Shape3, Tensor};

/// Seeded, reproducible random stream.
pub type RngStream = ChaCha8Rng;

pub fn rng_stream(seed: u64) -> RngStream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream seed per (epoch, example).
pub fn stream_seed(base: u64, epoch: u64, index: u64) -> u64 {
    splitmix(splitmix(base ^ splitmix(epoch)) ^ index)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub patch_size: Shape3,
    pub foreground_bias_prob: f64,
    pub zoom_prob: f64,
    pub zoom_range: [f64; 2],
    pub flip_prob: f64,
    pub noise_prob: f64,
    pub noise_std_range: [f64; 2],
    pub blur_prob: f64,
    pub blur_sigma_range: [f64; 2],
    pub brightness_prob: f64,
    pub brightness_range: [f64; 2],
    pub contrast_prob: f64,
    pub contrast_range: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            patch_size: [128; 3],
            foreground_bias_prob: 0.4,
            zoom_prob: 0.15,
            zoom_range: [1.0, 1.4],
            flip_prob: 0.5,
            noise_prob: 0.15,
            noise_std_range: [0.0, 0.33],
            blur_prob: 0.15,
            blur_sigma_range: [0.5, 1.5],
            brightness_prob: 0.15,
            brightness_range: [0.7, 1.3],
            contrast_prob: 0.15,
            contrast_range: [0.65, 1.5],
        }
    }
}

impl AugmentConfig {
    /// Crop only.
    pub fn crop_only(patch_size: Shape3) -> Self {
        AugmentConfig {
            patch_size,
            zoom_prob: 0.0,
            flip_prob: 0.0,
            noise_prob: 0.0,
            blur_prob: 0.0,
            brightness_prob: 0.0,
            contrast_prob: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("foreground_bias_prob", self.foreground_bias_prob),
            ("zoom_prob", self.zoom_prob),
            ("flip_prob", self.flip_prob),
            ("noise_prob", self.noise_prob),
            ("blur_prob", self.blur_prob),
            ("brightness_prob", self.brightness_prob),
            ("contrast_prob", self.contrast_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment.{name} = {p} is not a probability")));
            }
        }
        let ranges = [
            ("zoom_range", self.zoom_range, 1.0),
            ("noise_std_range", self.noise_std_range, 0.0),
            ("blur_sigma_range", self.blur_sigma_range, 1e-6),
            ("brightness_range", self.brightness_range, 0.0),
            ("contrast_range", self.contrast_range, 0.0),
        ];
        for (name, [lo, hi], min) in ranges {
            if !(lo <= hi && lo >= min && hi.is_finite()) {
                return Err(Error::Config(format!("augment.{name} = [{lo}, {hi}] is invalid")));
            }
        }
        if self.patch_size.contains(&0) {
            return Err(Error::Config("augment.patch_size must be positive".into()));
        }
        Ok(())
    }
}

/// What a pipeline draw did.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentTrace {
    pub bias_drawn: bool,
    pub crop_offset: Shape3,
    pub zoom: Option<f64>,
    pub flips: [bool; 3],
    pub noise_std: Option<f64>,
    pub blur_sigma: Option<f64>,
    pub brightness: Option<f64>,
    pub contrast: Option<f64>,
}

fn check_aligned(x: &Tensor<f32>, y: &Tensor<u8>) -> Result<()> {
    if x.ndim() != 4 || x.spatial() != y.spatial() || y.ndim() != 3 {
        return Err(Error::ShapeMismatch(format!("image {:?} vs label {:?}", x.shape(), y.shape())));
    }
    Ok(())
}

/// Crops `patch` at `offset` after symmetric zero padding up to `patch`.
pub fn crop_at(x: &Tensor<f32>, y: &Tensor<u8>, patch: Shape3, offset: Shape3) -> (Tensor<f32>, Tensor<u8>) {
    let hi = [offset[0] + patch[0], offset[1] + patch[1], offset[2] + patch[2]];
    (x.crop(offset, hi), y.crop(offset, hi))
}

/// Pads to at least `patch`, then crops at an offset that, when `biased`,
/// keeps a randomly chosen positive label voxel inside the patch.
pub fn biased_crop(
    x: &Tensor<f32>,
    y: &Tensor<u8>,
    patch: Shape3,
    biased: bool,
    rng: &mut RngStream,
) -> Result<(Tensor<f32>, Tensor<u8>, Shape3)> {
    check_aligned(x, y)?;
    let (pad_off, padded) = symmetric_pad(x.spatial(), patch);
    let (x, y) = if padded != x.spatial() {
        (x.pad(pad_off, padded, 0.0), y.pad(pad_off, padded, 0))
    } else {
        (x.clone(), y.clone())
    };
    let positives: Vec<usize> = if biased {
        y.data().iter().enumerate().filter(|(_, v)| **v != 0).map(|(i, _)| i).collect()
    } else {
        Vec::new()
    };
    let mut offset = [0; 3];
    if positives.is_empty() {
        for a in 0..3 {
            offset[a] = rng.random_range(0..=padded[a] - patch[a]);
        }
    } else {
        let i = positives[rng.random_range(0..positives.len())];
        let v = [i / (padded[1] * padded[2]), (i / padded[2]) % padded[1], i % padded[2]];
        for a in 0..3 {
            let lo = (v[a] + 1).saturating_sub(patch[a]);
            let hi = v[a].min(padded[a] - patch[a]);
            offset[a] = rng.random_range(lo..=hi);
        }
    }
    let (xc, yc) = crop_at(&x, &y, patch, offset);
    Ok((xc, yc, offset))
}

fn zoom_axis(len: usize, scale: f64, cubic: bool) -> AxisOperator {
    let big = ((len as f64) * scale).round().max(len as f64) as usize;
    let mut op = if cubic {
        AxisOperator::cubic(len, big)
    } else {
        AxisOperator::nearest_centered(len, big)
    };
    let lo = (big - len) / 2;
    op.taps = op.taps[lo..lo + len].to_vec();
    op
}

/// Enlarges by `scale` (cubic for intensities, nearest for the mask and the
/// label) and center-crops back to the input extent.
pub fn zoom_with_scale(x: &Tensor<f32>, y: &Tensor<u8>, scale: f64) -> Result<(Tensor<f32>, Tensor<u8>)> {
    check_aligned(x, y)?;
    let sp = x.spatial();
    let c = x.lead();
    let intens = c.min(4);
    let mut img = x.narrow_first(0, intens);
    let mut mask = x.narrow_first(intens, c);
    let mut lab = y.clone();
    for a in 0..3 {
        let cubic = zoom_axis(sp[a], scale, true);
        let near = zoom_axis(sp[a], scale, false);
        if !cubic.is_identity() {
            img = cubic.apply(&img, a + 1);
        }
        if !near.is_identity() {
            mask = near.gather(&mask, a + 1);
            lab = near.gather(&lab, a);
        }
    }
    Ok((Tensor::concat_first(&[&img, &mask])?, lab))
}

pub fn flip_axes(x: &Tensor<f32>, y: &Tensor<u8>, axes: [bool; 3]) -> (Tensor<f32>, Tensor<u8>) {
    (x.flip(axes), y.flip(axes))
}

fn intensity_channels(x: &Tensor<f32>) -> usize {
    x.lead().min(4)
}

pub fn add_gaussian_noise(x: &mut Tensor<f32>, std: f64, rng: &mut RngStream) {
    if std <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    for c in 0..intensity_channels(x) {
        for v in x.volume_mut(c) {
            *v += normal.sample(rng) as f32;
        }
    }
}

pub fn blur_with_sigma(x: &Tensor<f32>, sigma: f64) -> Tensor<f32> {
    let sp = x.spatial();
    let k = intensity_channels(x);
    let mut img = x.narrow_first(0, k);
    for a in 0..3 {
        img = AxisOperator::gaussian(sp[a], sigma).apply(&img, a + 1);
    }
    if k == x.lead() {
        img
    } else {
        Tensor::concat_first(&[&img, &x.narrow_first(k, x.lead())]).expect("same spatial shape")
    }
}

pub fn scale_intensity(x: &mut Tensor<f32>, factor: f64) {
    let f = factor as f32;
    for c in 0..intensity_channels(x) {
        for v in x.volume_mut(c) {
            *v *= f;
        }
    }
}

/// Multiplies by `factor`, then clips each channel to its prior range.
pub fn contrast_with_factor(x: &mut Tensor<f32>, factor: f64) {
    let f = factor as f32;
    for c in 0..intensity_channels(x) {
        let vol = x.volume_mut(c);
        let (lo, hi) = vol
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        for v in vol {
            *v = (*v * f).clamp(lo, hi);
        }
    }
}

fn draw(rng: &mut RngStream, p: f64, range: [f64; 2]) -> Option<f64> {
    if rng.random_bool(p) {
        Some(if range[0] < range[1] {
            rng.random_range(range[0]..range[1])
        } else {
            range[0]
        })
    } else {
        None
    }
}

pub fn augment_pipeline(
    x: &Tensor<f32>,
    y: &Tensor<u8>,
    cfg: &AugmentConfig,
    rng: &mut RngStream,
) -> Result<(Tensor<f32>, Tensor<u8>, AugmentTrace)> {
    let mut trace = AugmentTrace {
        bias_drawn: rng.random_bool(cfg.foreground_bias_prob),
        ..Default::default()
    };
    let (mut x, mut y, offset) = biased_crop(x, y, cfg.patch_size, trace.bias_drawn, rng)?;
    trace.crop_offset = offset;

    trace.zoom = draw(rng, cfg.zoom_prob, cfg.zoom_range);
    if let Some(s) = trace.zoom {
        (x, y) = zoom_with_scale(&x, &y, s)?;
    }
    for f in trace.flips.iter_mut() {
        *f = rng.random_bool(cfg.flip_prob);
    }
    if trace.flips.iter().any(|f| *f) {
        (x, y) = flip_axes(&x, &y, trace.flips);
    }
    trace.noise_std = draw(rng, cfg.noise_prob, cfg.noise_std_range);
    if let Some(s) = trace.noise_std {
        add_gaussian_noise(&mut x, s, rng);
    }
    trace.blur_sigma = draw(rng, cfg.blur_prob, cfg.blur_sigma_range);
    if let Some(s) = trace.blur_sigma {
        x = blur_with_sigma(&x, s);
    }
    trace.brightness = draw(rng, cfg.brightness_prob, cfg.brightness_range);
    if let Some(f) = trace.brightness {
        scale_intensity(&mut x, f);
    }
    trace.contrast = draw(rng, cfg.contrast_prob, cfg.contrast_range);
    if let Some(f) = trace.contrast {
        contrast_with_factor(&mut x, f);
    }
    Ok((x, y, trace))
}

/// Deterministic center crop (padding if needed), used for validation.
pub fn center_crop(x: &Tensor<f32>, y: &Tensor<u8>, patch: Shape3) -> Result<(Tensor<f32>, Tensor<u8>)> {
    check_aligned(x, y)?;
    let (pad_off, padded) = symmetric_pad(x.spatial(), patch);
    let x = x.pad(pad_off, padded, 0.0);
    let y = y.pad(pad_off, padded, 0);
    let offset = [0, 1, 2].map(|a| (padded[a] - patch[a]) / 2);
    Ok(crop_at(&x, &y, patch, offset))
}

/// Index of voxel `(x, y, z)` in a volume of extent `shape`.
pub fn voxel_index(shape: Shape3, v: Shape3) -> usize {
    offset3(shape, v[0], v[1], v[2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::resample::gaussian_kernel;
    use proptest::prelude::*;
    use rand::Rng;

    fn volume(sp: Shape3, seed: u64) -> (Tensor<f32>, Tensor<u8>) {
        let mut rng = rng_stream(seed);
        let n = sp.iter().product::<usize>();
        let mut data: Vec<f32> = (0..4 * n).map(|_| rng.random_range(-2.0..3.0f32)).collect();
        data.extend((0..n).map(|_| rng.random_bool(0.7) as u8 as f32));
        let label = (0..n).map(|_| [0u8, 0, 1, 2, 4][rng.random_range(0..5)]).collect();
        (Tensor::from_vec(vec![5, sp[0], sp[1], sp[2]], data), Tensor::from_vec(sp.to_vec(), label))
    }

    #[test]
    fn exact_size_crop_is_identity() {
        let (x, y) = volume([8, 8, 8], 0);
        let mut rng = rng_stream(1);
        let (xc, yc, off) = biased_crop(&x, &y, [8; 3], true, &mut rng).unwrap();
        assert_eq!(off, [0; 3]);
        assert_eq!((xc, yc), (x, y));
    }

    #[test]
    fn forced_bias_keeps_single_positive_voxel() {
        let sp = [20, 18, 16];
        let x = Tensor::zeros(vec![5, 20, 18, 16]);
        let mut y = Tensor::<u8>::zeros(sp.to_vec());
        let v = [17, 2, 9];
        y.data_mut()[voxel_index(sp, v)] = 4;
        for seed in 0..50 {
            let mut rng = rng_stream(seed);
            let (_, yc, off) = biased_crop(&x, &y, [8; 3], true, &mut rng).unwrap();
            assert_eq!(yc.data().iter().filter(|v| **v == 4).count(), 1);
            for a in 0..3 {
                assert!(off[a] <= v[a] && v[a] < off[a] + 8);
            }
        }
    }

    #[test]
    fn small_volumes_are_padded_with_zeros() {
        let sp = [5, 6, 7];
        let x = Tensor::full(vec![5, 5, 6, 7], 1.0f32);
        let y = Tensor::full(sp.to_vec(), 2u8);
        let mut rng = rng_stream(3);
        let (xc, yc, off) = biased_crop(&x, &y, [8; 3], false, &mut rng).unwrap();
        assert_eq!(off, [0; 3]);
        // placement oracle: [(8 - n) / 2, (8 - n) / 2 + n) is the original
        for c in 0..5 {
            for i in 0..8 {
                for j in 0..8 {
                    for k in 0..8 {
                        let inside = (1..6).contains(&i) && (1..7).contains(&j) && (0..7).contains(&k);
                        let v = xc.volume(c)[voxel_index([8; 3], [i, j, k])];
                        assert_eq!(v, if inside { 1.0 } else { 0.0 });
                        assert_eq!(yc.data()[voxel_index([8; 3], [i, j, k])], if inside { 2 } else { 0 });
                    }
                }
            }
        }
    }

    #[test]
    fn unit_zoom_is_identity() {
        let (x, y) = volume([6, 7, 5], 2);
        assert_eq!(zoom_with_scale(&x, &y, 1.0).unwrap(), (x, y));
    }

    #[test]
    fn zoomed_cube_grows_by_cube_of_scale() {
        let side = 32;
        let sp = [side; 3];
        let mut y = Tensor::<u8>::zeros(sp.to_vec());
        for i in 12..20 {
            for j in 12..20 {
                for k in 12..20 {
                    y.data_mut()[voxel_index(sp, [i, j, k])] = 1;
                }
            }
        }
        let x = Tensor::zeros(vec![5, side, side, side]);
        let (_, z) = zoom_with_scale(&x, &y, 1.25).unwrap();
        let count = z.data().iter().filter(|v| **v == 1).count();
        assert_eq!(count, 10 * 10 * 10);
        let ratio = count as f64 / 512.0;
        assert!((ratio - 1.25f64.powi(3)).abs() / 1.25f64.powi(3) < 0.05);
    }

    #[test]
    fn flip_moves_voxels_and_is_involution() {
        let (x, y) = volume([4, 3, 2], 5);
        let (fx, fy) = flip_axes(&x, &y, [true, false, false]);
        let sp = [4, 3, 2];
        for i in 0..4 {
            for j in 0..3 {
                for k in 0..2 {
                    assert_eq!(fy.data()[voxel_index(sp, [3 - i, j, k])], y.data()[voxel_index(sp, [i, j, k])]);
                    assert_eq!(fx.volume(2)[voxel_index(sp, [3 - i, j, k])], x.volume(2)[voxel_index(sp, [i, j, k])]);
                }
            }
        }
        let (bx, by) = flip_axes(&fx, &fy, [true, false, false]);
        assert_eq!((bx, by), (x, y));
    }

    #[test]
    fn noise_variance_matches_draw() {
        let mut x = Tensor::zeros(vec![5, 64, 64, 64]);
        let before = x.clone();
        add_gaussian_noise(&mut x, 0.3, &mut rng_stream(9));
        for c in 0..4 {
            let d = x.volume(c);
            let n = d.len() as f64;
            let mean = d.iter().map(|v| *v as f64).sum::<f64>() / n;
            let var = d.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / n;
            assert!((var - 0.09).abs() / 0.09 < 0.05);
        }
        assert_eq!(x.volume(4), before.volume(4));
    }

    #[test]
    fn blur_properties() {
        let constant = Tensor::full(vec![5, 9, 9, 9], 2.5f32);
        assert!(blur_with_sigma(&constant, 1.2).max_abs_diff(&constant) < 1e-6);

        let (x, _) = volume([16, 16, 16], 4);
        let b = blur_with_sigma(&x, 1.0);
        let var = |v: &[f32]| {
            let n = v.len() as f64;
            let m = v.iter().map(|a| *a as f64).sum::<f64>() / n;
            v.iter().map(|a| (*a as f64 - m).powi(2)).sum::<f64>() / n
        };
        for c in 0..4 {
            assert!(var(b.volume(c)) <= var(x.volume(c)));
        }
        assert_eq!(b.volume(4), x.volume(4));

        let side = 21;
        let mut imp = Tensor::zeros(vec![1, side, side, side]);
        imp.data_mut()[voxel_index([side; 3], [10, 10, 10])] = 1.0;
        let sigma = 1.5;
        let out = blur_with_sigma(&imp, sigma);
        let k = gaussian_kernel(sigma);
        let r = k.len() / 2;
        for i in 0..side {
            let d = i as isize - 10;
            let expect = if d.unsigned_abs() <= r { k[(d + r as isize) as usize] * k[r] * k[r] } else { 0.0 };
            let got = out.data()[voxel_index([side; 3], [i, 10, 10])] as f64;
            assert!((got - expect).abs() < 1e-6);
            let cont = (-(d * d) as f64 / (2.0 * sigma * sigma)).exp() / (2.0 * std::f64::consts::PI).sqrt() / sigma
                * k[r] * k[r];
            assert!((got - cont).abs() < 1e-3);
        }
    }

    #[test]
    fn brightness_and_contrast() {
        let (x, _) = volume([4, 4, 4], 6);
        let mut b = x.clone();
        scale_intensity(&mut b, 1.3);
        for c in 0..4 {
            for (o, i) in b.volume(c).iter().zip(x.volume(c)) {
                assert_eq!(*o, *i * 1.3f32);
            }
        }
        assert_eq!(b.volume(4), x.volume(4));

        let mut up = x.clone();
        contrast_with_factor(&mut up, 1.5);
        for c in 0..4 {
            let max = x.volume(c).iter().cloned().fold(f32::MIN, f32::max);
            let min = x.volume(c).iter().cloned().fold(f32::MAX, f32::min);
            assert!(up.volume(c).iter().all(|v| *v <= max && *v >= min));
        }
        let mut down = x.clone();
        contrast_with_factor(&mut down, 0.65);
        for c in 0..4 {
            for (o, i) in down.volume(c).iter().zip(x.volume(c)) {
                assert_eq!(*o, *i * 0.65f32);
            }
        }
        let mut same = x.clone();
        contrast_with_factor(&mut same, 1.0);
        assert_eq!(same, x);
    }

    #[test]
    fn crop_only_pipeline_matches_plain_crop() {
        let (x, y) = volume([12, 10, 9], 7);
        let cfg = AugmentConfig::crop_only([8; 3]);
        let (px, py, trace) = augment_pipeline(&x, &y, &cfg, &mut rng_stream(11)).unwrap();
        let mut rng = rng_stream(11);
        let biased = rng.random_bool(cfg.foreground_bias_prob);
        assert_eq!(biased, trace.bias_drawn);
        let (cx, cy, _) = biased_crop(&x, &y, [8; 3], biased, &mut rng).unwrap();
        assert_eq!((px, py), (cx, cy));
    }

    #[test]
    fn defaults_validate_and_bad_values_fail() {
        AugmentConfig::default().validate().unwrap();
        let bad = AugmentConfig {
            zoom_prob: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentConfig {
            contrast_range: [1.5, 0.65],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn stream_seeds_differ() {
        let a = stream_seed(1, 0, 0);
        assert_ne!(a, stream_seed(1, 0, 1));
        assert_ne!(a, stream_seed(1, 1, 0));
        assert_ne!(a, stream_seed(2, 0, 0));
        assert_eq!(a, stream_seed(1, 0, 0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn pipeline_invariants(seed in any::<u64>(), dims in proptest::array::uniform3(5usize..12)) {
            let (x, y) = volume(dims, seed);
            let cfg = AugmentConfig {
                patch_size: [8; 3],
                zoom_prob: 0.5,
                noise_prob: 0.5,
                blur_prob: 0.5,
                brightness_prob: 0.5,
                contrast_prob: 0.5,
                ..Default::default()
            };
            let (a, ay, at) = augment_pipeline(&x, &y, &cfg, &mut rng_stream(seed)).unwrap();
            let (b, by, bt) = augment_pipeline(&x, &y, &cfg, &mut rng_stream(seed)).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(&ay, &by);
            prop_assert_eq!(&at, &bt);
            prop_assert_eq!(a.shape(), &[5, 8, 8, 8]);
            prop_assert!(ay.data().iter().all(|v| matches!(v, 0 | 1 | 2 | 4)));
            prop_assert!(a.volume(4).iter().all(|v| *v == 0.0 || *v == 1.0));
            // intensity ops never alter geometry: the label equals the
            // spatial-only replay
            let (gx, gy) = {
                let (cx, cy) = {
                    let (off, padded) = symmetric_pad(x.spatial(), [8; 3]);
                    let px = x.pad(off, padded, 0.0);
                    let py = y.pad(off, padded, 0);
                    crop_at(&px, &py, [8; 3], at.crop_offset)
                };
                let (zx, zy) = match at.zoom { Some(s) => zoom_with_scale(&cx, &cy, s).unwrap(), None => (cx, cy) };
                flip_axes(&zx, &zy, at.flips)
            };
            prop_assert_eq!(&ay, &gy);
            prop_assert_eq!(a.volume(4), gx.volume(4));
        }
    }
}
