//! Full-volume prediction: overlapping windows blended with a Gaussian
//! importance map, optional 8-flip test-time augmentation, and checkpoint
//! ensembles.

use serde::{Deserialize, Serialize};

use crate::autograd::sigmoid_scalar;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{symmetric_pad, Shape3, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlidingWindowConfig {
    pub window: Shape3,
    pub overlap: f64,
    /// Gaussian sigma as a fraction of the window side.
    pub sigma_scale: f64,
}

impl Default for SlidingWindowConfig {
    fn default() -> Self {
        SlidingWindowConfig {
            window: [128; 3],
            overlap: 0.5,
            sigma_scale: 0.125,
        }
    }
}

impl SlidingWindowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config(format!("overlap must lie in [0, 1), got {}", self.overlap)));
        }
        if self.window.contains(&0) {
            return Err(Error::Config("window sides must be >= 1".into()));
        }
        if !(self.sigma_scale > 0.0) {
            return Err(Error::Config("sigma_scale must be > 0".into()));
        }
        Ok(())
    }
}

/// Anything mapping a `[B, C, w, h, d]` batch to `[B, 3, w, h, d]`
/// probabilities.
pub trait Predictor {
    fn predict(&self, x: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl Predictor for Model<f32> {
    fn predict(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let x = if x.shape()[1] > self.config().in_channels {
            narrow_channels(x, self.config().in_channels)
        } else {
            x.clone()
        };
        self.predict_proba(&x)
    }
}

/// Keeps the first `c` channels of a `[B, C, ...]` batch.
pub fn narrow_channels(x: &Tensor<f32>, c: usize) -> Tensor<f32> {
    let s = x.shape();
    let n: usize = s[2..].iter().product();
    let mut data = Vec::with_capacity(s[0] * c * n);
    for b in 0..s[0] {
        let start = b * s[1] * n;
        data.extend_from_slice(&x.data()[start..start + c * n]);
    }
    let mut shape = s.to_vec();
    shape[1] = c;
    Tensor::from_vec(shape, data)
}

/// Mean of the members' probabilities.
pub struct Ensemble<P> {
    pub members: Vec<P>,
}

impl<P: Predictor> Predictor for Ensemble<P> {
    fn predict(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        ensemble_average(&self.members, x)
    }
}

pub fn ensemble_average<P: Predictor>(members: &[P], x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let Some((first, rest)) = members.split_first() else {
        return Err(Error::Invalid("ensemble has no members".into()));
    };
    if rest.is_empty() {
        return first.predict(x);
    }
    let mut acc: Vec<f64> = first.predict(x)?.data().iter().map(|v| *v as f64).collect();
    let mut shape = Vec::new();
    for m in rest {
        let p = m.predict(x)?;
        for (a, v) in acc.iter_mut().zip(p.data()) {
            *a += *v as f64;
        }
        shape = p.shape().to_vec();
    }
    let k = members.len() as f64;
    Ok(Tensor::from_vec(shape, acc.into_iter().map(|v| (v / k) as f32).collect()))
}

/// Adapts a closure into a [`Predictor`].
pub struct FnPredictor<F>(pub F);

impl<F: Fn(&Tensor<f32>) -> Result<Tensor<f32>>> Predictor for FnPredictor<F> {
    fn predict(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        (self.0)(x)
    }
}

/// Predictor emitting the same logit everywhere.
pub struct ConstantLogit {
    pub logit: f32,
    pub channels: usize,
}

impl Predictor for ConstantLogit {
    fn predict(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut shape = x.shape().to_vec();
        shape[1] = self.channels;
        Ok(Tensor::full(shape, sigmoid_scalar(self.logit)))
    }
}

/// Window origins along one axis; the last window abuts the far edge.
pub fn axis_origins(dim: usize, window: usize, overlap: f64) -> Vec<usize> {
    assert!(dim >= window, "pad the volume to the window first");
    let stride = ((window as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let mut out = Vec::new();
    let mut o = 0;
    while o + window < dim {
        out.push(o);
        o += stride;
    }
    out.push(dim - window);
    out.dedup();
    out
}

/// All window origins, x-major.
pub fn window_grid(dims: Shape3, cfg: &SlidingWindowConfig) -> Vec<Shape3> {
    let axes: Vec<Vec<usize>> = (0..3).map(|a| axis_origins(dims[a], cfg.window[a], cfg.overlap)).collect();
    let mut out = Vec::new();
    for &x in &axes[0] {
        for &y in &axes[1] {
            for &z in &axes[2] {
                out.push([x, y, z]);
            }
        }
    }
    out
}

pub fn gaussian_profile(side: usize, sigma_scale: f64) -> Vec<f64> {
    let sigma = sigma_scale * side as f64;
    let c = (side / 2) as f64;
    (0..side)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Separable Gaussian weights peaking at 1 in the window centre, floored
/// at 1e-8.
pub fn gaussian_importance_map(window: Shape3, sigma_scale: f64) -> Tensor<f32> {
    let g: Vec<Vec<f64>> = (0..3).map(|a| gaussian_profile(window[a], sigma_scale)).collect();
    let peak = g.iter().map(|v| v.iter().cloned().fold(0.0, f64::max)).product::<f64>();
    let mut data = Vec::with_capacity(window.iter().product());
    for a in &g[0] {
        for b in &g[1] {
            for c in &g[2] {
                data.push(((a * b * c) / peak).max(1e-8) as f32);
            }
        }
    }
    Tensor::from_vec(window.to_vec(), data)
}

/// Blended sigmoid probabilities `[3, H, W, D]` for one `[C, H, W, D]`
/// volume.
pub fn sliding_window_predict<P: Predictor + ?Sized>(
    model: &P,
    x: &Tensor<f32>,
    cfg: &SlidingWindowConfig,
) -> Result<Tensor<f32>> {
    cfg.validate()?;
    if x.ndim() != 4 {
        return Err(Error::ShapeMismatch(format!("expected [C, H, W, D], got {:?}", x.shape())));
    }
    let orig = x.spatial();
    let (offset, padded) = symmetric_pad(orig, cfg.window);
    let xp = if padded == orig { x.clone() } else { x.pad(offset, padded, 0.0) };
    let origins = window_grid(padded, cfg);
    let out = blend(model, &xp, cfg, &origins)?;
    Ok(if padded == orig {
        out
    } else {
        out.crop(offset, [offset[0] + orig[0], offset[1] + orig[1], offset[2] + orig[2]])
    })
}

pub(crate) fn blend<P: Predictor + ?Sized>(
    model: &P,
    x: &Tensor<f32>,
    cfg: &SlidingWindowConfig,
    origins: &[Shape3],
) -> Result<Tensor<f32>> {
    let dims = x.spatial();
    let w = cfg.window;
    let run = |o: &Shape3| -> Result<Tensor<f32>> {
        let patch = x.crop(*o, [o[0] + w[0], o[1] + w[1], o[2] + w[2]]);
        let mut shape = vec![1];
        shape.extend_from_slice(patch.shape());
        let p = model.predict(&patch.reshape(shape))?;
        let s = p.shape().to_vec();
        Ok(p.reshape(s[1..].to_vec()))
    };
    if let [only] = origins {
        if *only == [0, 0, 0] && w == dims {
            return run(only);
        }
    }
    let weights = gaussian_importance_map(w, cfg.sigma_scale);
    let n: usize = dims.iter().product();
    let mut acc: Vec<f32> = Vec::new();
    let mut wsum = vec![0f32; n];
    let mut channels = 0;
    for o in origins {
        let p = run(o)?;
        if acc.is_empty() {
            channels = p.lead();
            acc = vec![0f32; channels * n];
        }
        for c in 0..channels {
            let pv = p.volume(c);
            let av = &mut acc[c * n..(c + 1) * n];
            for i in 0..w[0] {
                for j in 0..w[1] {
                    let src = (i * w[1] + j) * w[2];
                    let dst = ((o[0] + i) * dims[1] + o[1] + j) * dims[2] + o[2];
                    let wrow = &weights.data()[src..src + w[2]];
                    for k in 0..w[2] {
                        av[dst + k] += wrow[k] * pv[src + k];
                    }
                }
            }
        }
        for i in 0..w[0] {
            for j in 0..w[1] {
                let src = (i * w[1] + j) * w[2];
                let dst = ((o[0] + i) * dims[1] + o[1] + j) * dims[2] + o[2];
                for k in 0..w[2] {
                    wsum[dst + k] += weights.data()[src + k];
                }
            }
        }
    }
    for c in 0..channels {
        for (a, ws) in acc[c * n..(c + 1) * n].iter_mut().zip(&wsum) {
            *a /= *ws;
        }
    }
    let mut shape = vec![channels];
    shape.extend_from_slice(&dims);
    Ok(Tensor::from_vec(shape, acc))
}

/// The 8 axis-flip subsets, identity first.
pub fn flip_set() -> Vec<[bool; 3]> {
    (0..8).map(|m| [m & 1 != 0, m & 2 != 0, m & 4 != 0]).collect()
}

/// Mean of the sliding-window predictions over all 8 flips, each flipped
/// back before averaging.
pub fn tta_predict<P: Predictor + ?Sized>(model: &P, x: &Tensor<f32>, cfg: &SlidingWindowConfig) -> Result<Tensor<f32>> {
    let mut acc: Vec<f64> = Vec::new();
    let mut shape = Vec::new();
    for f in flip_set() {
        let p = sliding_window_predict(model, &x.flip(f), cfg)?.flip(f);
        if acc.is_empty() {
            acc = vec![0.0; p.numel()];
            shape = p.shape().to_vec();
        }
        for (a, v) in acc.iter_mut().zip(p.data()) {
            *a += *v as f64;
        }
    }
    Ok(Tensor::from_vec(shape, acc.into_iter().map(|v| (v / 8.0) as f32).collect()))
}

/// Sliding-window prediction with or without test-time flips.
pub fn predict_volume<P: Predictor + ?Sized>(
    model: &P,
    x: &Tensor<f32>,
    cfg: &SlidingWindowConfig,
    tta: bool,
) -> Result<Tensor<f32>> {
    if tta {
        tta_predict(model, x, cfg)
    } else {
        sliding_window_predict(model, x, cfg)
    }
}
